//! Carry-propagating 32-bit range coder (the LZMA layout) driven by
//! adaptive multi-symbol frequency tables.

use std::collections::HashMap;

use super::CodecError;

const TOP: u32 = 1 << 24;

/// Tables are halved once their total exceeds this.
pub const MAX_TOTAL: u32 = 1 << 16;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, cum: u32, freq: u32, total: u32) {
        let r = self.range / total;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xff00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xff;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = ((self.low as u32) << 8) as u64;
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
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            data,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Bytes consumed past the end of the input (zero for a well-formed
    /// stream).
    pub fn overrun(&self) -> usize {
        self.pos.saturating_sub(self.data.len())
    }

    /// Target cumulative frequency of the next symbol; follow with
    /// [`RangeDecoder::consume`].
    pub fn peek(&mut self, total: u32) -> (u32, u32) {
        let r = self.range / total;
        ((self.code / r).min(total - 1), r)
    }

    pub fn consume(&mut self, r: u32, cum: u32, freq: u32) {
        self.code -= r * cum;
        self.range = r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
    }
}

/// Adaptive counts for one context, Laplace-initialized.
#[derive(Debug, Clone)]
pub struct FrequencyModel {
    counts: Vec<u32>,
    total: u32,
}

impl FrequencyModel {
    pub fn new(symbols: usize) -> Self {
        FrequencyModel {
            counts: vec![1; symbols],
            total: symbols as u32,
        }
    }

    pub fn total(&self) -> u32 {
        self.total
    }

    /// `(cumulative, frequency)` of a 0-based symbol.
    pub fn interval(&self, symbol: usize) -> (u32, u32) {
        let cum = self.counts[..symbol].iter().sum();
        (cum, self.counts[symbol])
    }

    /// Symbol whose interval contains `target`, with that interval.
    pub fn find(&self, target: u32) -> (usize, u32, u32) {
        let mut cum = 0;
        for (s, &c) in self.counts.iter().enumerate() {
            if target < cum + c {
                return (s, cum, c);
            }
            cum += c;
        }
        let last = self.counts.len() - 1;
        (last, cum - self.counts[last], self.counts[last])
    }

    pub fn update(&mut self, symbol: usize) {
        self.counts[symbol] += 1;
        self.total += 1;
        if self.total > MAX_TOTAL {
            self.total = 0;
            for c in &mut self.counts {
                *c = c.div_ceil(2);
                self.total += *c;
            }
        }
    }
}

/// Rolling key of the last `order` 1-based symbols (0 marks "before
/// start"), tagged in the top bits with the position inside the current
/// tuple.
#[derive(Clone, Copy)]
struct Context {
    key: u128,
    order: usize,
    layout: TupleLayout,
    pos: usize,
}

/// Where a stream sits relative to the tuple grid: symbols are grouped in
/// blocks of `period`, and the stream's first symbol has phase `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TupleLayout {
    pub period: usize,
    pub start: usize,
}

impl TupleLayout {
    /// No tuple structure: every symbol has phase 0.
    pub const FLAT: TupleLayout = TupleLayout { period: 1, start: 0 };

    pub fn new(period: usize, start: usize) -> Self {
        TupleLayout { period, start: start % period.max(1) }
    }
}

impl Context {
    fn new(order: usize, layout: TupleLayout) -> Self {
        Context {
            key: 0,
            order,
            layout,
            pos: 0,
        }
    }

    fn model_key(&self) -> u128 {
        let phase = (self.layout.start + self.pos) % self.layout.period;
        self.key | (phase as u128) << 112
    }

    fn push(&mut self, symbol_1based: u32) {
        self.pos += 1;
        if self.order == 0 {
            return;
        }
        let mask = (1u128 << (16 * self.order)) - 1;
        self.key = ((self.key << 16) | symbol_1based as u128) & mask;
    }
}

fn check_symbols(levels: usize, context_order: usize, layout: TupleLayout) -> Result<(), CodecError> {
    if !(1..=8).contains(&layout.period) || layout.start >= layout.period {
        return Err(CodecError::Unencodable(format!("tuple layout {layout:?}")));
    }
    if !(2..=u16::MAX as usize).contains(&levels) {
        return Err(CodecError::Unencodable(format!("{levels} levels")));
    }
    if context_order > 7 {
        return Err(CodecError::Unencodable(format!("context order {context_order}")));
    }
    // every table must fit the coder's precision
    if levels as u32 > MAX_TOTAL {
        return Err(CodecError::Unencodable(format!("{levels} levels exceed coder precision")));
    }
    Ok(())
}

/// Codes 1-based indices with adaptive models conditioned on the previous
/// `context_order` symbols.
pub fn encode_stream(indices: &[u32], levels: usize, context_order: usize) -> Result<Vec<u8>, CodecError> {
    encode_stream_in(indices, levels, context_order, TupleLayout::FLAT)
}

pub fn decode_stream(payload: &[u8], count: usize, levels: usize, context_order: usize) -> Result<Vec<u32>, CodecError> {
    decode_stream_in(payload, count, levels, context_order, TupleLayout::FLAT)
}

/// Like [`encode_stream`], with the context also keyed on each symbol's
/// position inside its tuple.
pub fn encode_stream_in(
    indices: &[u32],
    levels: usize,
    context_order: usize,
    layout: TupleLayout,
) -> Result<Vec<u8>, CodecError> {
    check_symbols(levels, context_order, layout)?;
    let mut enc = RangeEncoder::new();
    let mut models: HashMap<u128, FrequencyModel> = HashMap::new();
    let mut ctx = Context::new(context_order, layout);
    for &q in indices {
        if q == 0 || q as usize > levels {
            return Err(CodecError::Unencodable(format!("index {q} outside 1..={levels}")));
        }
        let model = models.entry(ctx.model_key()).or_insert_with(|| FrequencyModel::new(levels));
        let s = q as usize - 1;
        let (cum, freq) = model.interval(s);
        enc.encode(cum, freq, model.total());
        model.update(s);
        ctx.push(q);
    }
    Ok(enc.finish())
}

pub fn decode_stream_in(
    payload: &[u8],
    count: usize,
    levels: usize,
    context_order: usize,
    layout: TupleLayout,
) -> Result<Vec<u32>, CodecError> {
    check_symbols(levels, context_order, layout).map_err(|e| CodecError::Malformed(e.to_string()))?;
    let mut dec = RangeDecoder::new(payload);
    let mut models: HashMap<u128, FrequencyModel> = HashMap::new();
    let mut ctx = Context::new(context_order, layout);
    // the shape comes from untrusted bytes; grow as symbols are decoded
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let model = models.entry(ctx.model_key()).or_insert_with(|| FrequencyModel::new(levels));
        let (target, r) = dec.peek(model.total());
        let (s, cum, freq) = model.find(target);
        dec.consume(r, cum, freq);
        model.update(s);
        let q = s as u32 + 1;
        out.push(q);
        ctx.push(q);
    }
    if dec.overrun() > 0 {
        return Err(CodecError::Malformed("payload ended early".into()));
    }
    Ok(out)
}
