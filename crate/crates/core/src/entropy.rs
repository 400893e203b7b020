//! Binary arithmetic coding with 16-bit probabilities, using 32-bit
//! low/high registers and deferred (pending) carry bits.

use crate::error::{Error, Result};

const PRECISION: u32 = 32;
const TOP: u64 = (1 << PRECISION) - 1;
const HALF: u64 = 1 << (PRECISION - 1);
const QUARTER: u64 = 1 << (PRECISION - 2);
const PROB_ONE: u64 = 1 << 16;

/// Probability that a symbol is 1, in units of 2^-16, kept within
/// `[1, 65535]` so neither symbol ever gets an empty interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Prob16(u16);

impl Prob16 {
    pub const HALF: Prob16 = Prob16(1 << 15);

    /// Rounds `p` to the nearest multiple of 2^-16 and clamps it to the open
    /// unit interval. Non-finite input maps to one half.
    pub fn from_prob(p: f64) -> Self {
        if !p.is_finite() {
            return Self::HALF;
        }
        Prob16(
            (p * PROB_ONE as f64)
                .round()
                .clamp(1.0, (PROB_ONE - 1) as f64) as u16,
        )
    }

    pub fn from_raw(raw: u16) -> Self {
        Prob16(raw.max(1))
    }

    pub fn raw(self) -> u16 {
        self.0
    }

    pub fn p1(self) -> f64 {
        self.0 as f64 / PROB_ONE as f64
    }

    /// Ideal code length of `bit` under this probability.
    pub fn cost_bits(self, bit: bool) -> f64 {
        let p = if bit { self.p1() } else { 1.0 - self.p1() };
        -p.log2()
    }
}

/// Finished arithmetic-coded bits, zero-padded to whole bytes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CodedStream {
    pub bytes: Vec<u8>,
    /// Bits emitted before padding.
    pub bits: u64,
}

#[derive(Default)]
struct BitWriter {
    bytes: Vec<u8>,
    bits: u64,
}

impl BitWriter {
    fn push(&mut self, bit: bool) {
        if self.bits.is_multiple_of(8) {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().expect("byte pushed") |= 0x80 >> (self.bits % 8);
        }
        self.bits += 1;
    }
}

/// Width of the interval assigned to symbol 0.
fn zero_width(range: u64, p1: Prob16) -> u64 {
    (range * (PROB_ONE - p1.0 as u64)) >> 16
}

pub struct ArithmeticEncoder {
    low: u64,
    high: u64,
    pending: u64,
    out: BitWriter,
    symbols: u64,
}

impl Default for ArithmeticEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl ArithmeticEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            high: TOP,
            pending: 0,
            out: BitWriter::default(),
            symbols: 0,
        }
    }

    fn emit(&mut self, bit: bool) {
        self.out.push(bit);
        for _ in 0..self.pending {
            self.out.push(!bit);
        }
        self.pending = 0;
    }

    pub fn encode(&mut self, bit: bool, p1: Prob16) {
        let range = self.high - self.low + 1;
        let split = self.low + zero_width(range, p1) - 1;
        if bit {
            self.low = split + 1;
        } else {
            self.high = split;
        }
        loop {
            if self.high < HALF {
                self.emit(false);
            } else if self.low >= HALF {
                self.emit(true);
                self.low -= HALF;
                self.high -= HALF;
            } else if self.low >= QUARTER && self.high < HALF + QUARTER {
                self.pending += 1;
                self.low -= QUARTER;
                self.high -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = self.high << 1 | 1;
        }
        self.symbols += 1;
    }

    pub fn symbols(&self) -> u64 {
        self.symbols
    }

    /// Writes two disambiguating bits plus any pending bits.
    pub fn finish(mut self) -> CodedStream {
        self.pending += 1;
        self.emit(self.low >= QUARTER);
        CodedStream {
            bits: self.out.bits,
            bytes: self.out.bytes,
        }
    }
}

/// Reads past the end of the input as zeros, up to one register's worth.
pub struct ArithmeticDecoder<'a> {
    bytes: &'a [u8],
    pos: u64,
    low: u64,
    high: u64,
    value: u64,
}

impl<'a> ArithmeticDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        let mut dec = Self {
            bytes,
            pos: 0,
            low: 0,
            high: TOP,
            value: 0,
        };
        for _ in 0..PRECISION {
            dec.value = dec.value << 1 | dec.next_bit()? as u64;
        }
        Ok(dec)
    }

    fn next_bit(&mut self) -> Result<bool> {
        let byte = (self.pos / 8) as usize;
        self.pos += 1;
        if self.pos > self.bytes.len() as u64 * 8 + PRECISION as u64 {
            return Err(Error::StreamExhausted);
        }
        Ok(self
            .bytes
            .get(byte)
            .is_some_and(|b| b & (0x80 >> ((self.pos - 1) % 8)) != 0))
    }

    pub fn decode(&mut self, p1: Prob16) -> Result<bool> {
        let range = self.high - self.low + 1;
        let split = self.low + zero_width(range, p1) - 1;
        let bit = self.value > split;
        if bit {
            self.low = split + 1;
        } else {
            self.high = split;
        }
        loop {
            if self.high < HALF {
            } else if self.low >= HALF {
                self.low -= HALF;
                self.high -= HALF;
                self.value -= HALF;
            } else if self.low >= QUARTER && self.high < HALF + QUARTER {
                self.low -= QUARTER;
                self.high -= QUARTER;
                self.value -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = self.high << 1 | 1;
            self.value = self.value << 1 | self.next_bit()? as u64;
        }
        Ok(bit)
    }
}

pub fn encode_stream(symbols: &[bool], probs: &[Prob16]) -> Result<CodedStream> {
    if symbols.len() != probs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} symbols but {} probabilities",
            symbols.len(),
            probs.len()
        )));
    }
    let mut enc = ArithmeticEncoder::new();
    for (&s, &p) in symbols.iter().zip(probs) {
        enc.encode(s, p);
    }
    Ok(enc.finish())
}

/// Decodes `n` symbols; `oracle` sees the symbol index and every symbol
/// decoded so far, mirroring what the encoder's model saw.
pub fn decode_stream(
    bytes: &[u8],
    n: usize,
    mut oracle: impl FnMut(usize, &[bool]) -> Prob16,
) -> Result<Vec<bool>> {
    let mut dec = ArithmeticDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let p = oracle(i, &out);
        out.push(dec.decode(p)?);
    }
    Ok(out)
}
