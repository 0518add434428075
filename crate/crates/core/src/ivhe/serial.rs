//! Binary container for keys and ciphertexts: magic `IVHE`, version byte,
//! kind byte, parameter block, dimension header, raw little-endian i64 words.
//! A JSON debug form comes from the serde derives on the types themselves.

use super::{Ciphertext, HeParams, IntMat, IvheError, KeyId, Result, SecretKey, SwitchKey};

const MAGIC: &[u8; 4] = b"IVHE";
const VERSION: u8 = 1;

const KIND_CIPHERTEXT: u8 = 1;
const KIND_SECRET: u8 = 2;
const KIND_SWITCH: u8 = 3;

pub(super) fn matrix_bytes(m: &IntMat) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + m.data.len() * 8);
    out.extend_from_slice(&(m.rows as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols as u64).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(kind: u8) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        buf.push(kind);
        Writer(buf)
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn words(&mut self, vs: &[i64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.i64(v);
        }
    }

    fn params(&mut self, p: &HeParams) {
        self.u64(p.n as u64);
        self.i64(p.w);
        self.u64(p.l as u64);
        self.i64(p.a_bound);
        self.i64(p.e_bound);
        self.i64(p.t_bound);
        self.0.push(p.non_negative as u8);
    }

    fn matrix(&mut self, m: &IntMat) {
        self.u64(m.rows as u64);
        self.u64(m.cols as u64);
        for &v in &m.data {
            self.i64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], kind: u8) -> Result<Self> {
        if buf.len() < 6 || &buf[..4] != MAGIC {
            return Err(IvheError::Serial("bad magic".into()));
        }
        if buf[4] != VERSION {
            return Err(IvheError::Serial(format!("unsupported version {}", buf[4])));
        }
        if buf[5] != kind {
            return Err(IvheError::Serial(format!("expected kind {kind}, got {}", buf[5])));
        }
        Ok(Reader { buf, pos: 6 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(IvheError::Serial("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn byte(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn words(&mut self) -> Result<Vec<i64>> {
        let n = self.u64()? as usize;
        if n > (1 << 28) {
            return Err(IvheError::Serial("implausible length".into()));
        }
        (0..n).map(|_| self.i64()).collect()
    }

    fn params(&mut self) -> Result<HeParams> {
        Ok(HeParams {
            n: self.u64()? as usize,
            w: self.i64()?,
            l: self.u64()? as u32,
            a_bound: self.i64()?,
            e_bound: self.i64()?,
            t_bound: self.i64()?,
            non_negative: self.byte()? != 0,
        })
    }

    fn matrix(&mut self) -> Result<IntMat> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        if rows.saturating_mul(cols) > (1 << 28) {
            return Err(IvheError::Serial("implausible matrix".into()));
        }
        let data = (0..rows * cols).map(|_| self.i64()).collect::<Result<Vec<_>>>()?;
        Ok(IntMat { rows, cols, data })
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(IvheError::Serial("trailing bytes".into()));
        }
        Ok(())
    }
}

impl Ciphertext {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(KIND_CIPHERTEXT);
        w.params(&self.params);
        w.u64(self.key.0);
        w.i64(self.noise_bound);
        w.words(&self.scale);
        w.words(&self.digits);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, KIND_CIPHERTEXT)?;
        let params = r.params()?;
        let key = KeyId(r.u64()?);
        let noise_bound = r.i64()?;
        let scale = r.words()?;
        let digits = r.words()?;
        r.done()?;
        Ok(Ciphertext { digits, key, params, scale, noise_bound })
    }
}

impl SecretKey {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(KIND_SECRET);
        w.params(&self.params);
        w.u64(self.id.0);
        w.words(&self.t);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, KIND_SECRET)?;
        let params = r.params()?;
        let id = KeyId(r.u64()?);
        let t = r.words()?;
        r.done()?;
        Ok(SecretKey { params, t, id })
    }
}

impl SwitchKey {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(KIND_SWITCH);
        w.params(&self.params);
        w.u64(self.id.0);
        w.matrix(&self.m);
        w.matrix(&self.a);
        w.matrix(&self.e);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, KIND_SWITCH)?;
        let params = r.params()?;
        let id = KeyId(r.u64()?);
        let m = r.matrix()?;
        let a = r.matrix()?;
        let e = r.matrix()?;
        r.done()?;
        Ok(SwitchKey { params, m, a, e, id })
    }
}
