//! 32-bit range coder with byte-wise renormalization and carry propagation.
//!
//! Coder state is integer only; output depends on nothing but the symbols and
//! the tables.

use super::table::{SymbolTable, TABLE_BITS};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
    /// The first emitted byte is always zero and is dropped.
    first: bool,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
            first: true,
        }
    }

    fn emit(&mut self, byte: u8) {
        if self.first {
            debug_assert_eq!(byte, 0);
            self.first = false;
        } else {
            self.out.push(byte);
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.emit(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn encode(&mut self, symbol: usize, table: &SymbolTable) {
        let r = self.range >> TABLE_BITS;
        self.low += r as u64 * table.start(symbol) as u64;
        self.range = r * table.freq(symbol);
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            data,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self.data.get(self.pos).ok_or_else(|| Error::Corrupt {
            offset: self.pos,
            detail: "stream ended early".into(),
        })?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, table: &SymbolTable) -> Result<usize> {
        let r = self.range >> TABLE_BITS;
        let target = self.code / r;
        if target >= table.total() {
            return Err(Error::Corrupt {
                offset: self.pos,
                detail: "code value outside the coding interval".into(),
            });
        }
        let symbol = table.lookup(target);
        self.code -= r * table.start(symbol);
        self.range = r * table.freq(symbol);
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte()? as u32;
        }
        Ok(symbol)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn is_exhausted(&self) -> bool {
        self.pos == self.data.len()
    }
}

/// Encodes `symbols` with one table.
pub fn range_encode(symbols: &[usize], table: &SymbolTable) -> Result<Vec<u8>> {
    if symbols.is_empty() {
        return Ok(Vec::new());
    }
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        if s >= table.len() {
            return Err(Error::Contract(format!(
                "symbol {s} at position {i} outside alphabet of {}",
                table.len()
            )));
        }
        enc.encode(s, table);
    }
    Ok(enc.finish())
}

pub fn range_decode(bytes: &[u8], n: usize, table: &SymbolTable) -> Result<Vec<usize>> {
    if n == 0 {
        if !bytes.is_empty() {
            return Err(Error::Corrupt {
                offset: 0,
                detail: "trailing bytes for an empty symbol sequence".into(),
            });
        }
        return Ok(Vec::new());
    }
    let mut dec = RangeDecoder::new(bytes)?;
    let out = (0..n).map(|_| dec.decode(table)).collect::<Result<Vec<_>>>()?;
    if !dec.is_exhausted() {
        return Err(Error::Corrupt {
            offset: dec.position(),
            detail: "trailing bytes after the last symbol".into(),
        });
    }
    Ok(out)
}
