//! Little-endian binary encoding shared by the stream and checkpoint files.

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn len_u32(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length exceeds u32"));
    }

    /// Length-prefixed UTF-8 text.
    pub fn text(&mut self, s: &str) {
        self.len_u32(s.len());
        self.bytes(s.as_bytes());
    }

    pub fn u32s(&mut self, vs: &[u32]) {
        self.len_u32(vs.len());
        vs.iter().for_each(|&v| self.u32(v));
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.len_u32(vs.len());
        vs.iter().for_each(|&v| self.f64(v));
    }

    /// rows u32, cols u32, then row-major f64 values.
    pub fn tensor(&mut self, t: &Tensor2) {
        self.len_u32(t.rows());
        self.len_u32(t.cols());
        t.data().iter().for_each(|&v| self.f64(v));
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    context: String,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader {
            buf,
            pos: 0,
            context: String::new(),
        }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    /// Label attached to truncation errors, e.g. `experience 3`.
    pub fn set_context(&mut self, context: impl Into<String>) {
        self.context = context.into();
    }

    pub fn fail(&self, message: impl Into<String>) -> Error {
        let message = message.into();
        if self.context.is_empty() {
            Error::format(self.pos, message)
        } else {
            Error::format(self.pos, format!("{} ({})", message, self.context))
        }
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated: need {n} bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    /// A u32 length prefix.
    pub fn length(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn checked_count(&mut self, n: usize, width: usize) -> Result<usize> {
        if n.saturating_mul(width) > self.buf.len() - self.pos {
            return Err(self.fail(format!("truncated: {n} items of {width} bytes declared")));
        }
        Ok(n)
    }

    pub fn text(&mut self) -> Result<String> {
        let n = self.length()?;
        let start = self.pos;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format(start, "text block is not UTF-8"))
    }

    pub fn u32s(&mut self) -> Result<Vec<u32>> {
        let n = self.length()?;
        let n = self.checked_count(n, 4)?;
        (0..n).map(|_| self.u32()).collect()
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.length()?;
        let n = self.checked_count(n, 8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn tensor(&mut self) -> Result<Tensor2> {
        let rows = self.length()?;
        let cols = self.length()?;
        let n = self.checked_count(rows.saturating_mul(cols), 8)?;
        let start = self.pos;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor2::from_vec(rows, cols, data).map_err(|e| Error::format(start, e.to_string()))
    }
}
