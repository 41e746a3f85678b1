//! CAN 2.0 logical frames: construction, CRC-15, bit stuffing and bitwise
//! arbitration.
//!
//! Bits follow the bus convention: `0` is dominant (D, actively driven) and
//! `1` is recessive (R, bus released). A standard frame with a 64-bit data
//! field serializes to 110 bits before stuffing; the start-of-frame bit is
//! counted as the leading bit of the 12-bit arbitration field.

use crate::error::{Error, Result};
use rand::Rng;
use std::ops::Range;

/// Identifier width of a standard frame.
pub const ID_BITS: usize = 11;
/// Start-of-frame plus identifier: the bits that settle bus arbitration.
pub const ARBITRATION_BITS: usize = 1 + ID_BITS;
/// Control field: 4-bit length code, one reserved dominant bit, and a
/// recessive delimiter that guarantees the data field starts on a fresh
/// stuffing run.
pub const CONTROL_BITS: usize = 6;
/// CRC sequence width.
pub const CRC_BITS: usize = 15;
/// Fixed-form recessive tail: CRC delimiter, ACK slot + delimiter, EOF, IFS.
pub const TAIL_BITS: usize = 1 + 2 + 7 + 3;
/// Serialized frame length minus the data field: 46 bits.
pub const FRAME_OVERHEAD_BITS: usize = ARBITRATION_BITS + CONTROL_BITS + CRC_BITS + TAIL_BITS;
/// Largest data field of a standard (non-extended) frame, in bits.
pub const MAX_STANDARD_DATA_BITS: usize = 64;

/// CAN 2.0 generator polynomial x^15+x^14+x^10+x^8+x^7+x^4+x^3+1, low 15 bits.
const CRC_POLY: u16 = 0x4599;
const CRC_MASK: u16 = 0x7fff;

/// Ordered sequence of bus bits; every element is 0 (dominant) or 1 (recessive).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitStream {
    bits: Vec<u8>,
}

impl BitStream {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build from a slice of 0/1 values.
    pub fn from_bits(bits: &[u8]) -> Self {
        assert!(bits.iter().all(|&b| b <= 1), "bits must be 0 or 1");
        Self {
            bits: bits.to_vec(),
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self { bits: vec![0; n] }
    }

    pub fn ones(n: usize) -> Self {
        Self { bits: vec![1; n] }
    }

    /// `n` bits drawn uniformly from a caller-owned generator.
    pub fn random<R: Rng>(rng: &mut R, n: usize) -> Self {
        Self {
            bits: (0..n).map(|_| rng.random_range(0..2u8)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bit(&self, i: usize) -> u8 {
        self.bits[i]
    }

    pub fn push(&mut self, bit: u8) {
        debug_assert!(bit <= 1);
        self.bits.push(bit);
    }

    pub fn as_bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        self.bits.iter().copied()
    }

    pub fn extend(&mut self, other: &BitStream) {
        self.bits.extend_from_slice(&other.bits);
    }
}

impl FromIterator<u8> for BitStream {
    fn from_iter<T: IntoIterator<Item = u8>>(iter: T) -> Self {
        let bits: Vec<u8> = iter.into_iter().collect();
        Self::from_bits(&bits)
    }
}

/// CRC-15 of a bit stream: bit-serial division by the CAN 2.0 generator
/// polynomial with a zero-initialized register.
pub fn crc15(bits: &BitStream) -> u16 {
    let mut reg: u16 = 0;
    for b in bits.iter() {
        let feedback = (b as u16) ^ ((reg >> 14) & 1);
        reg = (reg << 1) & CRC_MASK;
        if feedback != 0 {
            reg ^= CRC_POLY;
        }
    }
    reg
}

/// A CAN 2.0 logical frame with an 11-bit identifier.
///
/// `extended_data_mode` lifts the 64-bit data field limit so frame timing for
/// longer fields can be studied; the on-wire length code stays 4 bits wide and
/// only the serialized length matters to the simulation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanFrame {
    pub identifier: u16,
    pub data: BitStream,
    pub extended_data_mode: bool,
}

impl CanFrame {
    pub fn build(identifier: u16, data: BitStream, extended_data_mode: bool) -> Result<Self> {
        if identifier as u32 >= 1 << ID_BITS {
            return Err(Error::IdentifierOutOfRange(identifier as u32));
        }
        if data.len() % 8 != 0 {
            return Err(Error::InvalidDataLength(
                data.len(),
                "must be a multiple of 8 bits",
            ));
        }
        if !extended_data_mode && data.len() > MAX_STANDARD_DATA_BITS {
            return Err(Error::InvalidDataLength(
                data.len(),
                "exceeds 64 bits without extended_data_mode",
            ));
        }
        Ok(Self {
            identifier,
            data,
            extended_data_mode,
        })
    }

    pub fn data_bits(&self) -> usize {
        self.data.len()
    }

    /// Length of the region covered by the CRC and subject to stuffing:
    /// SOF, identifier, control, data and the CRC sequence itself.
    pub fn stuffable_bits(&self) -> usize {
        ARBITRATION_BITS + CONTROL_BITS + self.data.len() + CRC_BITS
    }

    /// Serialized unstuffed frame length: 46 bits of overhead plus the data field.
    pub fn unstuffed_len(&self) -> usize {
        FRAME_OVERHEAD_BITS + self.data.len()
    }

    /// Unstuffed bit index of the first data bit.
    pub fn data_field_start(&self) -> usize {
        ARBITRATION_BITS + CONTROL_BITS
    }

    /// SOF + identifier + control field.
    fn header(&self) -> BitStream {
        let mut out = BitStream::new();
        out.push(0); // SOF
        for i in (0..ID_BITS).rev() {
            out.push(((self.identifier >> i) & 1) as u8);
        }
        // 4-bit length code in bytes (truncated in extended mode), a reserved
        // dominant bit, then a recessive delimiter. The delimiter breaks any
        // dominant run before the data field, so an all-dominant field always
        // stuffs as the repeating D-D-D-D-D-R pattern.
        let dlc = (self.data.len() / 8) & 0xf;
        for i in (0..4).rev() {
            out.push(((dlc >> i) & 1) as u8);
        }
        out.push(0);
        out.push(1);
        out
    }

    /// CRC-15 over SOF, identifier, control field and data.
    pub fn crc(&self) -> u16 {
        let mut covered = self.header();
        covered.extend(&self.data);
        crc15(&covered)
    }

    /// Full unstuffed frame: header, data, CRC sequence, then the fixed
    /// recessive tail (CRC delimiter, ACK slot + delimiter, EOF, IFS). The ACK
    /// slot is transmitted recessive since no responding node is modeled.
    pub fn serialize_unstuffed(&self) -> BitStream {
        let mut out = self.header();
        out.extend(&self.data);
        let crc = self.crc();
        for i in (0..CRC_BITS).rev() {
            out.push(((crc >> i) & 1) as u8);
        }
        for _ in 0..TAIL_BITS {
            out.push(1);
        }
        debug_assert_eq!(out.len(), self.unstuffed_len());
        out
    }

    /// Stuff the frame for transmission. Stuffing covers SOF through the end
    /// of the CRC sequence; the recessive tail is fixed-form and unstuffed.
    pub fn to_stuffed(&self) -> StuffedFrame {
        let full = self.serialize_unstuffed();
        let head = BitStream::from_bits(&full.as_bits()[..self.stuffable_bits()]);
        let (mut stuffed, map) = stuff_with_map(&head);
        let data_start = map[self.data_field_start()];
        let data_end = map[self.data_field_start() + self.data.len()];
        stuffed.data_field = Some(data_start..data_end);
        for &b in &full.as_bits()[self.stuffable_bits()..] {
            stuffed.bits.push(b);
        }
        stuffed
    }
}

/// A bit stream after stuff-bit insertion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StuffedFrame {
    pub bits: BitStream,
    /// Indices of the inserted stuff bits, in stuffed coordinates.
    pub stuff_positions: Vec<usize>,
    /// Extent of the data field in stuffed coordinates, when built from a
    /// frame. Stuff bits triggered by the data field fall inside the range.
    pub data_field: Option<Range<usize>>,
}

/// Insert a complement bit after every run of five identical bits. Inserted
/// bits count toward subsequent run detection.
pub fn stuff(input: &BitStream) -> StuffedFrame {
    stuff_with_map(input).0
}

fn stuff_with_map(input: &BitStream) -> (StuffedFrame, Vec<usize>) {
    let mut out = BitStream::new();
    let mut positions = Vec::new();
    // map[i] = stuffed index of input bit i; one extra entry marks the end
    let mut map = Vec::with_capacity(input.len() + 1);
    let mut run_bit = 2u8;
    let mut run = 0usize;
    for b in input.iter() {
        map.push(out.len());
        out.push(b);
        if b == run_bit {
            run += 1;
        } else {
            run_bit = b;
            run = 1;
        }
        if run == 5 {
            positions.push(out.len());
            out.push(b ^ 1);
            run_bit = b ^ 1;
            run = 1;
        }
    }
    map.push(out.len());
    (
        StuffedFrame {
            bits: out,
            stuff_positions: positions,
            data_field: None,
        },
        map,
    )
}

/// Remove stuff bits. Fails with the offending index if six identical
/// consecutive bits appear, which a conformant transmitter never produces.
pub fn unstuff(input: &BitStream) -> Result<BitStream> {
    let mut out = BitStream::new();
    let mut run_bit = 2u8;
    let mut run = 0usize;
    let mut i = 0usize;
    while i < input.len() {
        let b = input.bit(i);
        if b == run_bit {
            run += 1;
        } else {
            run_bit = b;
            run = 1;
        }
        out.push(b);
        if run == 5 && i + 1 < input.len() {
            let s = input.bit(i + 1);
            if s == b {
                return Err(Error::StuffViolation { index: i + 1 });
            }
            run_bit = s;
            run = 1;
            i += 2;
            continue;
        }
        i += 1;
    }
    Ok(out)
}

/// Resolve bus contention: the lowest identifier wins, which is what bitwise
/// dominant-0 arbitration from the MSB converges to.
pub fn arbitrate(identifiers: &[u16]) -> Result<u16> {
    identifiers
        .iter()
        .copied()
        .min()
        .ok_or(Error::EmptyArbitration)
}

/// A run of consecutive dominant bits inside the stuffed data field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DominantWindow {
    /// First bit of the run, in stuffed coordinates.
    pub start_bit: usize,
    pub len_bits: usize,
}

/// Runs of dominant bits inside the stuffed data field, in order. With an
/// all-dominant data field this is the 5-bit-on / 1-bit-off gating schedule
/// (plus a shorter final run when the field length is not a multiple of 5).
pub fn dominant_schedule(stuffed: &StuffedFrame) -> Vec<DominantWindow> {
    let Some(range) = stuffed.data_field.clone() else {
        return Vec::new();
    };
    let mut windows = Vec::new();
    let mut i = range.start;
    while i < range.end {
        if stuffed.bits.bit(i) == 0 {
            let start = i;
            while i < range.end && stuffed.bits.bit(i) == 0 {
                i += 1;
            }
            windows.push(DominantWindow {
                start_bit: start,
                len_bits: i - start,
            });
        } else {
            i += 1;
        }
    }
    windows
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Reference stuffer, written as plain run-length bookkeeping so the main
    /// implementation can be checked against an independent path.
    fn reference_stuff(input: &[u8]) -> Vec<u8> {
        let mut out: Vec<u8> = Vec::new();
        let mut count = 0usize;
        let mut last = 2u8;
        for &b in input {
            out.push(b);
            count = if b == last { count + 1 } else { 1 };
            last = b;
            if count == 5 {
                out.push(1 - b);
                last = 1 - b;
                count = 1;
            }
        }
        out
    }

    /// Independent CRC-15 oracle: grade-school polynomial long division over
    /// GF(2) with the 16-bit generator 0xc599.
    fn crc15_long_division(bits: &[u8]) -> u16 {
        let gen: [u8; 16] = [1, 1, 0, 0, 0, 1, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1];
        let mut work: Vec<u8> = bits.to_vec();
        work.extend(std::iter::repeat(0).take(15));
        for i in 0..bits.len() {
            if work[i] == 1 {
                for (j, g) in gen.iter().enumerate() {
                    work[i + j] ^= g;
                }
            }
        }
        work[bits.len()..]
            .iter()
            .fold(0u16, |acc, &b| (acc << 1) | b as u16)
    }

    fn bits(v: &[u8]) -> BitStream {
        BitStream::from_bits(v)
    }

    #[test]
    fn standard_frame_with_full_data_field_is_110_bits() {
        let frame = CanFrame::build(0, BitStream::zeros(64), false).unwrap();
        assert_eq!(frame.serialize_unstuffed().len(), 110);
    }

    #[test]
    fn empty_data_field_frame_is_46_bits() {
        let frame = CanFrame::build(0, BitStream::zeros(0), false).unwrap();
        assert_eq!(frame.serialize_unstuffed().len(), 46);
    }

    #[test]
    fn identifier_out_of_range_is_rejected() {
        let err = CanFrame::build(1 << 11, BitStream::zeros(8), false);
        assert!(matches!(err, Err(Error::IdentifierOutOfRange(_))));
    }

    #[test]
    fn data_length_must_be_whole_bytes() {
        let err = CanFrame::build(0, BitStream::zeros(13), false);
        assert!(matches!(err, Err(Error::InvalidDataLength(13, _))));
    }

    #[test]
    fn long_data_needs_extended_mode() {
        assert!(CanFrame::build(0, BitStream::zeros(128), false).is_err());
        let frame = CanFrame::build(0, BitStream::zeros(128), true).unwrap();
        assert_eq!(frame.serialize_unstuffed().len(), 46 + 128);
    }

    #[test]
    fn crc_of_all_zero_input_is_zero() {
        assert_eq!(crc15(&BitStream::zeros(82)), 0);
        assert_eq!(crc15(&BitStream::new()), 0);
    }

    #[test]
    fn crc_matches_long_division_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x00c5_0c5e);
        for _ in 0..10_000 {
            let n = rng.random_range(0..96usize);
            let v: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
            assert_eq!(crc15(&bits(&v)), crc15_long_division(&v));
        }
    }

    #[test]
    fn crc_of_identifier_zero_frame_header() {
        // SOF + identifier 0 + control + 64 zero data bits of the canonical
        // all-dominant frame; value frozen from the long-division oracle.
        let frame = CanFrame::build(0, BitStream::zeros(64), false).unwrap();
        let covered = &frame.serialize_unstuffed().as_bits()[..82].to_vec();
        let oracle = crc15_long_division(covered);
        assert_eq!(frame.crc(), oracle);
        assert_eq!(frame.crc(), 0x7a32);
    }

    #[test]
    fn stuffing_inserts_complement_after_five() {
        let stuffed = stuff(&bits(&[0, 0, 0, 0, 0]));
        assert_eq!(stuffed.bits, bits(&[0, 0, 0, 0, 0, 1]));
        assert_eq!(stuffed.stuff_positions, vec![5]);
    }

    #[test]
    fn stuffing_empty_input_is_empty() {
        let stuffed = stuff(&BitStream::new());
        assert!(stuffed.bits.is_empty());
        assert!(stuffed.stuff_positions.is_empty());
    }

    #[test]
    fn stuffing_all_dominant_field_gives_ddddd_r_pattern() {
        let stuffed = stuff(&BitStream::zeros(64));
        assert_eq!(stuffed.bits.len(), 76);
        assert_eq!(stuffed.stuff_positions.len(), 12);
        for (i, b) in stuffed.bits.iter().enumerate() {
            let expect = if i % 6 == 5 { 1 } else { 0 };
            assert_eq!(b, expect, "bit {i}");
        }
    }

    #[test]
    fn stuff_counts_inserted_bits_in_later_runs() {
        // Five zeros force a recessive stuff bit; four more recessive bits
        // then complete a run of five ones, forcing a dominant stuff bit.
        let stuffed = stuff(&bits(&[0, 0, 0, 0, 0, 1, 1, 1, 1]));
        assert_eq!(stuffed.bits, bits(&[0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 0]));
        assert_eq!(stuffed.stuff_positions, vec![5, 10]);
    }

    #[test]
    fn unstuff_inverts_the_basic_example() {
        let out = unstuff(&bits(&[0, 0, 0, 0, 0, 1])).unwrap();
        assert_eq!(out, bits(&[0, 0, 0, 0, 0]));
    }

    #[test]
    fn unstuff_reports_violation_position() {
        let err = unstuff(&bits(&[0, 0, 0, 0, 0, 0]));
        assert!(matches!(err, Err(Error::StuffViolation { index: 5 })));
    }

    #[test]
    fn stuff_unstuff_round_trip_random_streams() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x57ff);
        for _ in 0..1000 {
            let n = rng.random_range(0..=128usize);
            let x = BitStream::random(&mut rng, n);
            let stuffed = stuff(&x);
            assert_eq!(stuffed.bits.as_bits(), reference_stuff(x.as_bits()));
            assert_eq!(unstuff(&stuffed.bits).unwrap(), x);
        }
    }

    #[test]
    fn stuffed_output_never_has_six_identical_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6666);
        for _ in 0..500 {
            let n = rng.random_range(0..=256usize);
            let stuffed = stuff(&BitStream::random(&mut rng, n));
            let b = stuffed.bits.as_bits();
            for w in b.windows(6) {
                assert!(w.iter().any(|&x| x != w[0]));
            }
        }
    }

    #[test]
    fn all_dominant_field_stuffs_to_l_plus_l_over_5() {
        for l in [0usize, 5, 8, 64, 200, 1024, 4096] {
            let stuffed = stuff(&BitStream::zeros(l));
            assert_eq!(stuffed.bits.len(), l + l / 5);
        }
    }

    #[test]
    fn arbitrate_returns_minimum() {
        assert_eq!(arbitrate(&[0x0ff, 0x100]).unwrap(), 0x0ff);
        assert_eq!(arbitrate(&[0x2a]).unwrap(), 0x2a);
        assert_eq!(arbitrate(&[0x7ff, 0x000, 0x3c1]).unwrap(), 0x000);
        assert!(matches!(arbitrate(&[]), Err(Error::EmptyArbitration)));
    }

    #[test]
    fn arbitrate_matches_bitwise_dominance_simulation() {
        // Walk bit positions MSB-first; a node drops out the first time it
        // sends recessive while the bus reads dominant.
        fn bitwise_winner(ids: &[u16]) -> u16 {
            let mut alive: Vec<u16> = ids.to_vec();
            for i in (0..ID_BITS).rev() {
                let bus_dominant = alive.iter().any(|id| (id >> i) & 1 == 0);
                if bus_dominant {
                    alive.retain(|id| (id >> i) & 1 == 0);
                }
            }
            assert_eq!(alive.len(), 1, "identifiers must be unique");
            alive[0]
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0xa5b1);
        for _ in 0..500 {
            let n = rng.random_range(1..=8usize);
            let mut ids: Vec<u16> = Vec::new();
            while ids.len() < n {
                let id = rng.random_range(0..(1u16 << ID_BITS));
                if !ids.contains(&id) {
                    ids.push(id);
                }
            }
            assert_eq!(arbitrate(&ids).unwrap(), bitwise_winner(&ids));
        }
    }

    #[test]
    fn dominant_schedule_of_full_frame() {
        let frame = CanFrame::build(0, BitStream::zeros(64), false).unwrap();
        let stuffed = frame.to_stuffed();
        let windows = dominant_schedule(&stuffed);
        assert_eq!(windows.len(), 13);
        assert!(windows[..12].iter().all(|w| w.len_bits == 5));
        assert_eq!(windows[12].len_bits, 4);
        let covered: usize = windows.iter().map(|w| w.len_bits).sum();
        assert_eq!(covered, 64);
        // stuffed data field spans 76 bits
        let range = stuffed.data_field.clone().unwrap();
        assert_eq!(range.end - range.start, 76);
        // windows are spaced one recessive stuff bit apart
        for pair in windows.windows(2) {
            assert_eq!(pair[1].start_bit, pair[0].start_bit + pair[0].len_bits + 1);
        }
    }

    #[test]
    fn dominant_schedule_empty_data_field() {
        let frame = CanFrame::build(0x123, BitStream::zeros(0), false).unwrap();
        assert!(dominant_schedule(&frame.to_stuffed()).is_empty());
    }

    #[test]
    fn dominant_schedule_extended_1024_bit_field() {
        let frame = CanFrame::build(0, BitStream::zeros(1024), true).unwrap();
        let stuffed = frame.to_stuffed();
        let range = stuffed.data_field.clone().unwrap();
        // 204 stuff bits fall inside the data field
        let in_field = stuffed
            .stuff_positions
            .iter()
            .filter(|&&p| range.contains(&p))
            .count();
        assert_eq!(in_field, 204);
        let windows = dominant_schedule(&stuffed);
        let covered: usize = windows.iter().map(|w| w.len_bits).sum();
        assert_eq!(covered, 1024);
        assert_eq!(windows.len(), 205);
    }

    #[test]
    fn data_field_pattern_is_fresh_for_any_identifier() {
        // The control-field delimiter must isolate the data field stuffing
        // from whatever run state the header left behind.
        let mut rng = ChaCha8Rng::seed_from_u64(0x1d);
        for _ in 0..200 {
            let id = rng.random_range(0..(1u16 << ID_BITS));
            let frame = CanFrame::build(id, BitStream::zeros(64), false).unwrap();
            let stuffed = frame.to_stuffed();
            let range = stuffed.data_field.clone().unwrap();
            assert_eq!(range.end - range.start, 76, "identifier {id:#x}");
            let windows = dominant_schedule(&stuffed);
            assert_eq!(windows.len(), 13, "identifier {id:#x}");
        }
    }

    #[test]
    fn round_trip_full_frame_through_stuffing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0f0f);
        for _ in 0..100 {
            let id = rng.random_range(0..(1u16 << ID_BITS));
            let data_len = 8 * rng.random_range(0..=8usize);
            let data = BitStream::random(&mut rng, data_len);
            let frame = CanFrame::build(id, data, false).unwrap();
            let stuffed = frame.to_stuffed();
            let head_len = frame.stuffable_bits();
            let stuffed_head = BitStream::from_bits(
                &stuffed.bits.as_bits()[..stuffed.bits.len() - TAIL_BITS],
            );
            let recovered = unstuff(&stuffed_head).unwrap();
            assert_eq!(recovered.len(), head_len);
            assert_eq!(
                recovered.as_bits(),
                &frame.serialize_unstuffed().as_bits()[..head_len]
            );
        }
    }
}
