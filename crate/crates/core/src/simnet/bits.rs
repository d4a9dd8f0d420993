//! Bit-exact message payloads. Messages are measured in bits, so
//! payloads are packed bit strings rather than byte buffers.

#[inline]
fn mask(width: u32) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

/// A packed sequence of bits; the unit of every message.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitString {
    words: Vec<u64>,
    bits: u64,
}

impl BitString {
    pub fn empty() -> Self {
        BitString::default()
    }

    /// Packs whole 64-bit words.
    pub fn from_words(words: &[u64]) -> Self {
        BitString {
            words: words.to_vec(),
            bits: words.len() as u64 * 64,
        }
    }

    pub fn bit_len(&self) -> u64 {
        self.bits
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn writer() -> BitWriter {
        BitWriter::default()
    }

    pub fn reader(&self) -> BitReader<'_> {
        BitReader { bs: self, pos: 0 }
    }
}

/// Appends fixed-width fields to a [`BitString`].
#[derive(Debug, Default)]
pub struct BitWriter {
    words: Vec<u64>,
    bits: u64,
}

impl BitWriter {
    /// Appends the low `width` bits of `value`.
    #[inline]
    pub fn push_bits(&mut self, value: u64, width: u32) {
        assert!(width <= 64, "field width {width} exceeds 64");
        if width == 0 {
            return;
        }
        let value = value & mask(width);
        let offset = (self.bits % 64) as u32;
        if offset == 0 {
            self.words.push(value);
        } else {
            *self.words.last_mut().unwrap() |= value << offset;
            if offset + width > 64 {
                self.words.push(value >> (64 - offset));
            }
        }
        self.bits += width as u64;
    }

    #[inline]
    pub fn push_u64(&mut self, value: u64) {
        self.push_bits(value, 64);
    }

    /// Appends a signed value as 128-bit two's complement.
    pub fn push_i128(&mut self, value: i128) {
        let raw = value as u128;
        self.push_u64(raw as u64);
        self.push_u64((raw >> 64) as u64);
    }

    pub fn push_payload(&mut self, payload: &BitString) {
        let mut r = payload.reader();
        let mut left = payload.bit_len();
        while left >= 64 {
            self.push_u64(r.read_u64());
            left -= 64;
        }
        if left > 0 {
            self.push_bits(r.read_bits(left as u32), left as u32);
        }
    }

    pub fn bit_len(&self) -> u64 {
        self.bits
    }

    pub fn finish(self) -> BitString {
        BitString {
            words: self.words,
            bits: self.bits,
        }
    }
}

/// Reads fixed-width fields back out of a [`BitString`].
#[derive(Debug)]
pub struct BitReader<'a> {
    bs: &'a BitString,
    pos: u64,
}

impl BitReader<'_> {
    #[inline]
    pub fn read_bits(&mut self, width: u32) -> u64 {
        assert!(width <= 64, "field width {width} exceeds 64");
        if width == 0 {
            return 0;
        }
        assert!(
            self.pos + width as u64 <= self.bs.bits,
            "read past end of bit string"
        );
        let idx = (self.pos / 64) as usize;
        let offset = (self.pos % 64) as u32;
        let mut v = self.bs.words[idx] >> offset;
        if offset + width > 64 {
            v |= self.bs.words[idx + 1] << (64 - offset);
        }
        self.pos += width as u64;
        v & mask(width)
    }

    #[inline]
    pub fn read_u64(&mut self) -> u64 {
        self.read_bits(64)
    }

    pub fn read_i128(&mut self) -> i128 {
        let lo = self.read_u64() as u128;
        let hi = self.read_u64() as u128;
        (lo | (hi << 64)) as i128
    }

    pub fn remaining(&self) -> u64 {
        self.bs.bits - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_has_no_bits() {
        let b = BitString::empty();
        assert_eq!(b.bit_len(), 0);
        assert!(b.is_empty());
    }

    #[test]
    fn packs_across_word_boundaries() {
        let mut w = BitString::writer();
        w.push_bits(0b101, 3);
        w.push_u64(u64::MAX);
        w.push_bits(0x7F, 7);
        let b = w.finish();
        assert_eq!(b.bit_len(), 74);
        let mut r = b.reader();
        assert_eq!(r.read_bits(3), 0b101);
        assert_eq!(r.read_u64(), u64::MAX);
        assert_eq!(r.read_bits(7), 0x7F);
        assert_eq!(r.remaining(), 0);
    }

    #[test]
    fn masks_overwide_values() {
        let mut w = BitString::writer();
        w.push_bits(u64::MAX, 4);
        w.push_bits(0, 4);
        let b = w.finish();
        assert_eq!(b.reader().read_bits(8), 0x0F);
    }

    #[test]
    fn i128_round_trips() {
        for v in [0i128, 1, -1, i128::MAX, i128::MIN, -123_456_789_012_345] {
            let mut w = BitString::writer();
            w.push_i128(v);
            assert_eq!(w.finish().reader().read_i128(), v);
        }
    }

    #[test]
    #[should_panic(expected = "read past end")]
    fn overread_panics() {
        let b = BitString::from_words(&[1]);
        let mut r = b.reader();
        r.read_u64();
        r.read_bits(1);
    }

    proptest! {
        #[test]
        fn fields_round_trip(fields in prop::collection::vec((any::<u64>(), 1u32..=64), 0..40)) {
            let mut w = BitString::writer();
            for &(v, width) in &fields {
                w.push_bits(v, width);
            }
            let total: u64 = fields.iter().map(|&(_, w)| w as u64).sum();
            let b = w.finish();
            prop_assert_eq!(b.bit_len(), total);
            let mut r = b.reader();
            for &(v, width) in &fields {
                prop_assert_eq!(r.read_bits(width), v & mask(width));
            }
        }

        #[test]
        fn push_payload_concatenates(a in prop::collection::vec(any::<u64>(), 0..5),
                                     tail_bits in 0u32..63,
                                     tail: u64) {
            let mut w1 = BitString::writer();
            for &v in &a {
                w1.push_u64(v);
            }
            w1.push_bits(tail, tail_bits);
            let payload = w1.finish();

            let mut w2 = BitString::writer();
            w2.push_bits(0b11, 2);
            w2.push_payload(&payload);
            let b = w2.finish();
            prop_assert_eq!(b.bit_len(), 2 + payload.bit_len());
            let mut r = b.reader();
            prop_assert_eq!(r.read_bits(2), 0b11);
            for &v in &a {
                prop_assert_eq!(r.read_u64(), v);
            }
            prop_assert_eq!(r.read_bits(tail_bits), tail & mask(tail_bits));
        }
    }
}
