//! Versioned binary checkpoint format.
//!
//! Layout (all integers little-endian):
//! magic `NSNCKPT\0`, u32 version, a fixed meta block describing the model
//! (cell kind, layer/hidden/embedding/vocab sizes, likelihood family and
//! sigma2, noise spec, K, injection placement, dropout config), then a u32
//! tensor count followed by named tensors: u16 name length, UTF-8 name,
//! u8 rank, u64 dims, f64 data. Writing the same model twice produces the
//! same bytes.

use crate::expfam::{Family, LikelihoodHead};
use crate::model::{DropoutConfig, LayerInjection, NoisinModel};
use crate::noise::{InjectionMode, NoiseFamily, NoiseSpec};
use crate::rnn::{CellKind, CellParams, GateParams};
use crate::tensor::Tensor;
use crate::{Error, Result};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"NSNCKPT\0";
const VERSION: u32 = 1;

fn cell_kind_tag(k: CellKind) -> u8 {
    match k {
        CellKind::ErnnSigmoid => 0,
        CellKind::ErnnTanh => 1,
        CellKind::Lstm => 2,
    }
}

fn cell_kind_from(tag: u8) -> Result<CellKind> {
    match tag {
        0 => Ok(CellKind::ErnnSigmoid),
        1 => Ok(CellKind::ErnnTanh),
        2 => Ok(CellKind::Lstm),
        t => Err(Error::Config(format!("bad cell kind tag {t}"))),
    }
}

fn family_tag(f: Family) -> u8 {
    match f {
        Family::Bernoulli => 0,
        Family::Gaussian => 1,
        Family::Poisson => 2,
        Family::Categorical => 3,
    }
}

fn family_from(tag: u8) -> Result<Family> {
    match tag {
        0 => Ok(Family::Bernoulli),
        1 => Ok(Family::Gaussian),
        2 => Ok(Family::Poisson),
        3 => Ok(Family::Categorical),
        t => Err(Error::Config(format!("bad family tag {t}"))),
    }
}

fn noise_family_tag(f: NoiseFamily) -> u8 {
    NoiseFamily::ALL.iter().position(|x| *x == f).unwrap() as u8
}

fn noise_family_from(tag: u8) -> Result<NoiseFamily> {
    NoiseFamily::ALL
        .get(tag as usize)
        .copied()
        .ok_or_else(|| Error::Config(format!("bad noise family tag {tag}")))
}

fn mode_tag(m: InjectionMode) -> u8 {
    match m {
        InjectionMode::Additive => 0,
        InjectionMode::Multiplicative => 1,
        InjectionMode::Off => 2,
    }
}

fn mode_from(tag: u8) -> Result<InjectionMode> {
    match tag {
        0 => Ok(InjectionMode::Additive),
        1 => Ok(InjectionMode::Multiplicative),
        2 => Ok(InjectionMode::Off),
        t => Err(Error::Config(format!("bad injection mode tag {t}"))),
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.u16(name.len() as u16);
        self.buf.extend_from_slice(name.as_bytes());
        self.u8(t.shape().len() as u8);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Config("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name_len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| Error::Config("bad tensor name".into()))?
            .to_string();
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        Ok((name, Tensor::new(&shape, data)?))
    }
}

pub fn encode_model(model: &NoisinModel) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);

    let kind = model.cells[0].kind;
    w.u8(cell_kind_tag(kind));
    w.u32(model.cells.len() as u32);
    w.u32(model.hidden_dim() as u32);
    let emb_dim = model.embedding.dims2().map(|(_, d)| d).unwrap_or(0);
    w.u32(emb_dim as u32);
    w.u32(model.vocab_size() as u32);
    w.u8(family_tag(model.head.family));
    w.f64(model.head.sigma2);
    w.u8(noise_family_tag(model.noise.family));
    w.f64(model.noise.gamma);
    w.f64(model.noise.shape_alpha);
    w.u8(mode_tag(model.noise.mode));
    w.u32(model.k_samples as u32);
    w.u8(match model.injection {
        LayerInjection::EveryLayer => 0,
        LayerInjection::FinalLayerOnly => 1,
    });
    match model.dropout {
        Some(d) => {
            w.u8(1);
            w.f64(d.input_rate);
            w.f64(d.recurrent_rate);
            w.f64(d.output_rate);
            w.u8(d.per_sequence as u8);
        }
        None => {
            w.u8(0);
            w.f64(0.0);
            w.f64(0.0);
            w.f64(0.0);
            w.u8(0);
        }
    }

    let params = model.named_params();
    w.u32(params.len() as u32);
    for (name, t) in params {
        w.tensor(&name, t);
    }
    w.buf
}

pub fn decode_model(bytes: &[u8]) -> Result<NoisinModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Config("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Config(format!("unsupported checkpoint version {version}")));
    }
    let kind = cell_kind_from(r.u8()?)?;
    let layers = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let emb_dim = r.u32()? as usize;
    let vocab = r.u32()? as usize;
    let family = family_from(r.u8()?)?;
    let sigma2 = r.f64()?;
    let noise_family = noise_family_from(r.u8()?)?;
    let gamma = r.f64()?;
    let alpha = r.f64()?;
    let mode = mode_from(r.u8()?)?;
    let k = r.u32()? as usize;
    let injection = match r.u8()? {
        0 => LayerInjection::EveryLayer,
        1 => LayerInjection::FinalLayerOnly,
        t => return Err(Error::Config(format!("bad injection tag {t}"))),
    };
    let has_dropout = r.u8()? == 1;
    let d_in = r.f64()?;
    let d_rec = r.f64()?;
    let d_out = r.f64()?;
    let per_seq = r.u8()? == 1;
    let dropout = if has_dropout {
        let mut d = DropoutConfig::new(d_in, d_rec, d_out)?;
        d.per_sequence = per_seq;
        Some(d)
    } else {
        None
    };

    let count = r.u32()? as usize;
    let mut by_name: HashMap<String, Tensor> = HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        by_name.insert(name, t);
    }

    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = by_name
            .remove(name)
            .ok_or_else(|| Error::Config(format!("checkpoint missing tensor '{name}'")))?;
        if t.shape() != shape {
            return Err(Error::Config(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t)
    };

    let embedding = take("embedding", &[vocab, emb_dim])?;
    let mut cells = Vec::with_capacity(layers);
    for l in 0..layers {
        let input = if l == 0 { emb_dim } else { hidden };
        let names: &[&str] =
            if kind.is_lstm() { &crate::rnn::LSTM_GATE_NAMES } else { &["gate"] };
        let mut gates = Vec::with_capacity(names.len());
        for g in names {
            gates.push(GateParams {
                w_x: take(&format!("layer{l}.{g}.w_x"), &[input, hidden])?,
                w_h: take(&format!("layer{l}.{g}.w_h"), &[hidden, hidden])?,
                b: take(&format!("layer{l}.{g}.b"), &[1, hidden])?,
            });
        }
        cells.push(CellParams { kind, gates });
    }
    let v = take("head.v", &[hidden, vocab])?;
    let bias = take("head.b", &[1, vocab])?;
    let head = LikelihoodHead::new(family, v, bias, sigma2)?;
    let noise = if mode == InjectionMode::Off {
        NoiseSpec::off()
    } else {
        NoiseSpec::new(noise_family, gamma, alpha, mode)?
    };
    NoisinModel::new(embedding, cells, head, noise, k.max(1), injection, dropout)
}

pub fn save_model(model: &NoisinModel, path: &Path) -> Result<()> {
    let bytes = encode_model(model);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<NoisinModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_model(&bytes)
}
