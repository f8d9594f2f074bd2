//! On-disk model format: a JSON manifest next to a little-endian binary blob.
//!
//! The manifest records the format version, the blob's length and SHA-256,
//! every tensor's dtype, shape and byte range, all quantization parameters by
//! name, and the layer list. Tensors and parameters of layer `i` live under
//! the name prefix `L{i}`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionStages, AttentionWeights, IntAttention};
use crate::error::{IrnnError, Result};
use crate::linear::QuantMatrix;
use crate::lstm::{IntBiLstm, IntLstmCell, LstmStages, LstmWeights, NormWeights, GATE_NAMES, NORM_NAMES};
use crate::madnorm::{MadNorm, MadNormAffine, MadNormQParams};
use crate::pwl::PwlTable;
use crate::quant::{BitWidth, QuantParams, QuantTensor};
use crate::runtime::int_model::{ConvertConfig, IntInput, IntLayer, IntModel, IntProjection, IntResidual};
use crate::runtime::model::{layer_prefix, FloatLayer, FloatModel, ModelInput, INPUT_STAGE};

/// Manifest format version written and accepted.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Float,
    Int,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    U16,
    I32,
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U16 => 2,
            Dtype::I32 | Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Length in bytes.
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobInfo {
    /// Path relative to the manifest's directory.
    pub file: String,
    pub length: usize,
    /// Lowercase hex digest.
    pub sha256: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum InputDesc {
    Tokens { vocab: usize },
    /// Integer models keep the input parameters under `"input"`.
    Features { dim: usize },
}

/// A layer entry; every string is a tensor and parameter name prefix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerDesc {
    Embedding { table: String },
    Lstm { cell: String },
    Bilstm { fwd: String, bwd: String },
    MadnormLstm { cell: String },
    AttentionDecoder { memory: usize, cell: String, attention: String },
    ResidualAdd { from: usize, params: String },
    FinalProjection { weights: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: ModelKind,
    pub endianness: String,
    pub blob: BlobInfo,
    pub input: InputDesc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ConvertConfig>,
    pub tensors: BTreeMap<String, TensorEntry>,
    pub qparams: BTreeMap<String, QuantParams>,
    pub layers: Vec<LayerDesc>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[derive(Default)]
struct Writer {
    blob: Vec<u8>,
    tensors: BTreeMap<String, TensorEntry>,
    qparams: BTreeMap<String, QuantParams>,
}

impl Writer {
    fn put(&mut self, name: &str, dtype: Dtype, shape: Vec<usize>, bytes: Vec<u8>) {
        // Tensors start on 8-byte boundaries.
        while self.blob.len() % 8 != 0 {
            self.blob.push(0);
        }
        let entry = TensorEntry {
            dtype,
            shape,
            offset: self.blob.len(),
            length: bytes.len(),
        };
        self.blob.extend(bytes);
        let prev = self.tensors.insert(name.to_string(), entry);
        debug_assert!(prev.is_none(), "tensor {name} written twice");
    }

    fn i32s(&mut self, name: &str, shape: Vec<usize>, v: &[i32]) {
        self.put(name, Dtype::I32, shape, v.iter().flat_map(|x| x.to_le_bytes()).collect());
    }

    fn f64s(&mut self, name: &str, shape: Vec<usize>, v: &[f64]) {
        self.put(name, Dtype::F64, shape, v.iter().flat_map(|x| x.to_le_bytes()).collect());
    }

    /// Float weights are stored as `f32`.
    fn f32s(&mut self, name: &str, shape: Vec<usize>, v: &[f64]) {
        self.put(name, Dtype::F32, shape, v.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect());
    }

    fn qp(&mut self, name: &str, qp: &QuantParams) {
        self.qparams.insert(name.to_string(), *qp);
    }

    fn codes(&mut self, name: &str, t: &QuantTensor) {
        let bytes = match t.qparams().bits() {
            BitWidth::B8 => t.data().iter().map(|&q| q as u8).collect(),
            BitWidth::B16 => t.data().iter().flat_map(|q| q.to_le_bytes()).collect(),
        };
        let dtype = match t.qparams().bits() {
            BitWidth::B8 => Dtype::U8,
            BitWidth::B16 => Dtype::U16,
        };
        self.put(name, dtype, t.shape().to_vec(), bytes);
        self.qp(name, t.qparams());
    }

    fn matrix(&mut self, name: &str, m: &QuantMatrix) {
        self.codes(name, m.weights());
        if let Some(b) = m.bias() {
            self.i32s(&format!("{name}.bias"), vec![b.len()], b);
        }
    }

    fn table(&mut self, name: &str, t: &PwlTable) {
        self.i32s(&format!("{name}.knots"), vec![t.knots_q().len()], t.knots_q());
        self.f64s(&format!("{name}.values"), vec![t.knot_values().len()], t.knot_values());
        self.qp(&format!("{name}.in"), t.in_qp());
        self.qp(&format!("{name}.out"), t.out_qp());
    }

    fn cell(&mut self, p: &str, c: &IntLstmCell) {
        let st = c.stages();
        for (k, qp) in [("x", &st.x), ("h", &st.h), ("wx", &st.wx), ("wh", &st.wh), ("fc", &st.fc), ("ij", &st.ij), ("c", &st.c)] {
            self.qp(&format!("{p}.{k}"), qp);
        }
        for (g, qp) in GATE_NAMES.iter().zip(&st.gates) {
            self.qp(&format!("{p}.gate.{g}"), qp);
        }
        if let Some((s, ws)) = &st.context {
            self.qp(&format!("{p}.s"), s);
            self.qp(&format!("{p}.ws"), ws);
        }
        self.matrix(&format!("{p}.w_x"), c.w_x());
        self.matrix(&format!("{p}.w_h"), c.w_h());
        if let Some(w) = c.w_s() {
            self.matrix(&format!("{p}.w_s"), w);
        }
        if let Some(norms) = c.norms() {
            for (n, norm) in NORM_NAMES.iter().zip(norms.iter()) {
                let q = norm.qparams();
                let np = format!("{p}.{n}");
                for (k, qp) in [("mu", &q.qp_mu), ("xhat", &q.qp_xhat), ("d", &q.qp_d), ("y", &q.qp_y)] {
                    self.qp(&format!("{np}.{k}"), qp);
                }
                if let Some(a) = &q.affine {
                    self.codes(&format!("{np}.gamma"), &a.gamma);
                    self.codes(&format!("{np}.beta"), &a.beta);
                    self.qp(&format!("{np}.out"), &a.qp_out);
                }
            }
        }
        for (g, t) in GATE_NAMES.iter().zip(c.gate_tables()) {
            self.table(&format!("{p}.act.{g}"), t);
        }
        self.table(&format!("{p}.tanh_c"), c.output_table());
    }

    fn attention(&mut self, p: &str, a: &IntAttention) {
        let st = a.stages();
        for (k, qp) in [
            ("h_dec", &st.h_dec),
            ("h_enc", &st.h_enc),
            ("q", &st.q),
            ("k", &st.k),
            ("pre", &st.pre),
            ("e", &st.e),
            ("exp_in", &st.exp_in),
            ("s", &st.s),
        ] {
            self.qp(&format!("{p}.{k}"), qp);
        }
        self.matrix(&format!("{p}.w_q"), a.w_q());
        self.matrix(&format!("{p}.w_k"), a.w_k());
        self.codes(&format!("{p}.v"), a.v());
        self.table(&format!("{p}.tanh"), a.tanh_table());
        self.table(&format!("{p}.exp"), a.exp_table());
    }

    fn lstm_f32(&mut self, p: &str, w: &LstmWeights) {
        let g = 4 * w.hidden_size;
        self.f32s(&format!("{p}.w_x"), vec![g, w.input_size], &w.w_x);
        self.f32s(&format!("{p}.w_h"), vec![g, w.hidden_size], &w.w_h);
        self.f32s(&format!("{p}.bias"), vec![g], &w.bias);
    }

    fn finish(self, path: &Path, kind: ModelKind, input: InputDesc, config: Option<ConvertConfig>, layers: Vec<LayerDesc>) -> Result<()> {
        let blob_path = blob_path(path);
        let file = blob_path
            .file_name()
            .and_then(|f| f.to_str())
            .ok_or_else(|| IrnnError::InvalidModel(format!("bad model path {}", path.display())))?
            .to_string();
        let manifest = Manifest {
            version: FORMAT_VERSION,
            kind,
            endianness: "little".into(),
            blob: BlobInfo {
                file,
                length: self.blob.len(),
                sha256: sha256_hex(&self.blob),
            },
            input,
            config,
            tensors: self.tensors,
            qparams: self.qparams,
            layers,
        };
        std::fs::write(&blob_path, &self.blob)?;
        std::fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

/// Blob written next to the manifest: same stem, `.bin` extension.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

struct Reader {
    blob: Vec<u8>,
    manifest: Manifest,
}

fn invalid(msg: String) -> IrnnError {
    IrnnError::InvalidModel(msg)
}

impl Reader {
    fn open(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        let version = raw
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| invalid("manifest has no version".into()))?;
        if version != u64::from(FORMAT_VERSION) {
            return Err(IrnnError::Version(u32::try_from(version).unwrap_or(u32::MAX)));
        }
        let manifest: Manifest = serde_json::from_value(raw)?;
        if manifest.endianness != "little" {
            return Err(invalid(format!("unsupported endianness {}", manifest.endianness)));
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        let blob = std::fs::read(dir.join(&manifest.blob.file))?;
        if blob.len() < manifest.blob.length {
            return Err(IrnnError::TruncatedBlob {
                name: manifest.blob.file.clone(),
                end: manifest.blob.length,
                len: blob.len(),
            });
        }
        if blob.len() != manifest.blob.length || sha256_hex(&blob) != manifest.blob.sha256 {
            return Err(IrnnError::Checksum);
        }
        for (name, e) in &manifest.tensors {
            let end = e.offset.checked_add(e.length).ok_or_else(|| invalid(format!("tensor {name} range overflows")))?;
            if end > blob.len() {
                return Err(IrnnError::TruncatedBlob {
                    name: name.clone(),
                    end,
                    len: blob.len(),
                });
            }
            let numel: usize = e.shape.iter().product();
            if numel * e.dtype.size() != e.length {
                return Err(invalid(format!("tensor {name}: shape {:?} does not match {} bytes", e.shape, e.length)));
            }
        }
        Ok(Reader { blob, manifest })
    }

    fn has(&self, name: &str) -> bool {
        self.manifest.tensors.contains_key(name)
    }

    fn raw(&self, name: &str, dtypes: &[Dtype]) -> Result<(&TensorEntry, &[u8])> {
        let e = self
            .manifest
            .tensors
            .get(name)
            .ok_or_else(|| invalid(format!("missing tensor {name}")))?;
        if !dtypes.contains(&e.dtype) {
            return Err(invalid(format!("tensor {name} has dtype {:?}, expected {dtypes:?}", e.dtype)));
        }
        Ok((e, &self.blob[e.offset..e.offset + e.length]))
    }

    fn i32s(&self, name: &str) -> Result<Vec<i32>> {
        let (_, b) = self.raw(name, &[Dtype::I32])?;
        Ok(b.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn f64s(&self, name: &str) -> Result<Vec<f64>> {
        let (_, b) = self.raw(name, &[Dtype::F64])?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn f32s(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let (e, b) = self.raw(name, &[Dtype::F32])?;
        let v = b
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        Ok((e.shape.clone(), v))
    }

    fn f32_2d(&self, name: &str) -> Result<(usize, usize, Vec<f64>)> {
        match self.f32s(name)? {
            (s, v) if s.len() == 2 => Ok((s[0], s[1], v)),
            (s, _) => Err(invalid(format!("tensor {name} must be 2-D, got {s:?}"))),
        }
    }

    fn qp(&self, name: &str) -> Result<QuantParams> {
        self.manifest
            .qparams
            .get(name)
            .copied()
            .ok_or_else(|| IrnnError::MissingQParams(name.to_string()))
    }

    fn codes(&self, name: &str) -> Result<QuantTensor> {
        let qp = self.qp(name)?;
        let (e, b) = self.raw(name, &[Dtype::U8, Dtype::U16])?;
        let want = match qp.bits() {
            BitWidth::B8 => Dtype::U8,
            BitWidth::B16 => Dtype::U16,
        };
        if e.dtype != want {
            return Err(invalid(format!("tensor {name}: dtype {:?} disagrees with its {}-bit parameters", e.dtype, qp.bits().bits())));
        }
        let data = match e.dtype {
            Dtype::U8 => b.iter().map(|&v| u16::from(v)).collect(),
            _ => b.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect(),
        };
        QuantTensor::new(e.shape.clone(), data, qp)
    }

    fn matrix(&self, name: &str) -> Result<QuantMatrix> {
        let bias_name = format!("{name}.bias");
        let bias = if self.has(&bias_name) { Some(self.i32s(&bias_name)?) } else { None };
        QuantMatrix::from_parts(self.codes(name)?, bias)
    }

    fn table(&self, name: &str) -> Result<PwlTable> {
        PwlTable::from_knots(
            self.i32s(&format!("{name}.knots"))?,
            self.f64s(&format!("{name}.values"))?,
            self.qp(&format!("{name}.in"))?,
            self.qp(&format!("{name}.out"))?,
        )
    }

    fn cell(&self, p: &str) -> Result<IntLstmCell> {
        let g = |k: &str| self.qp(&format!("{p}.{k}"));
        let context = if self.manifest.qparams.contains_key(&format!("{p}.s")) {
            Some((g("s")?, g("ws")?))
        } else {
            None
        };
        let stages = LstmStages {
            x: g("x")?,
            h: g("h")?,
            wx: g("wx")?,
            wh: g("wh")?,
            context,
            gates: [g("gate.i")?, g("gate.f")?, g("gate.j")?, g("gate.o")?],
            fc: g("fc")?,
            ij: g("ij")?,
            c: g("c")?,
        };
        let w_s_name = format!("{p}.w_s");
        let w_s = if self.has(&w_s_name) { Some(self.matrix(&w_s_name)?) } else { None };
        let norms = if self.has(&format!("{p}.{}.gamma", NORM_NAMES[0])) {
            let inputs = [stages.wx, stages.wh, stages.c];
            let mut v = Vec::with_capacity(3);
            for (n, qp_x) in NORM_NAMES.iter().zip(inputs) {
                let np = format!("{p}.{n}");
                let gn = |k: &str| self.qp(&format!("{np}.{k}"));
                v.push(MadNorm::new(MadNormQParams {
                    qp_x,
                    qp_mu: gn("mu")?,
                    qp_xhat: gn("xhat")?,
                    qp_d: gn("d")?,
                    qp_y: gn("y")?,
                    affine: Some(MadNormAffine {
                        gamma: self.codes(&format!("{np}.gamma"))?,
                        beta: self.codes(&format!("{np}.beta"))?,
                        qp_out: gn("out")?,
                    }),
                })?);
            }
            Some(v.try_into().expect("three norms"))
        } else {
            None
        };
        let acts = [
            self.table(&format!("{p}.act.i"))?,
            self.table(&format!("{p}.act.f"))?,
            self.table(&format!("{p}.act.j"))?,
            self.table(&format!("{p}.act.o"))?,
        ];
        IntLstmCell::new(
            stages,
            self.matrix(&format!("{p}.w_x"))?,
            self.matrix(&format!("{p}.w_h"))?,
            w_s,
            norms,
            acts,
            self.table(&format!("{p}.tanh_c"))?,
        )
    }

    fn attention(&self, p: &str) -> Result<IntAttention> {
        let g = |k: &str| self.qp(&format!("{p}.{k}"));
        let stages = AttentionStages {
            h_dec: g("h_dec")?,
            h_enc: g("h_enc")?,
            q: g("q")?,
            k: g("k")?,
            pre: g("pre")?,
            e: g("e")?,
            exp_in: g("exp_in")?,
            s: g("s")?,
        };
        IntAttention::new(
            stages,
            self.matrix(&format!("{p}.w_q"))?,
            self.matrix(&format!("{p}.w_k"))?,
            self.codes(&format!("{p}.v"))?,
            self.table(&format!("{p}.tanh"))?,
            self.table(&format!("{p}.exp"))?,
        )
    }

    fn lstm_f32(&self, p: &str) -> Result<LstmWeights> {
        let (g, n, w_x) = self.f32_2d(&format!("{p}.w_x"))?;
        let (_, _, w_h) = self.f32_2d(&format!("{p}.w_h"))?;
        let (_, bias) = self.f32s(&format!("{p}.bias"))?;
        LstmWeights::new(n, g / 4, w_x, w_h, bias)
    }
}

/// Kind of model stored at `path`.
pub fn model_kind(path: &Path) -> Result<ModelKind> {
    let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let kind = raw.get("kind").cloned().ok_or_else(|| invalid("manifest has no kind".into()))?;
    Ok(serde_json::from_value(kind)?)
}

impl IntModel {
    /// Writes the manifest to `path` and the blob next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::default();
        let input = match self.input() {
            IntInput::Tokens { vocab } => InputDesc::Tokens { vocab },
            IntInput::Features { dim, qp } => {
                w.qp(INPUT_STAGE, &qp);
                InputDesc::Features { dim }
            }
        };
        let mut layers = Vec::with_capacity(self.layers().len());
        for (i, l) in self.layers().iter().enumerate() {
            let p = layer_prefix(i);
            layers.push(match l {
                IntLayer::Embedding(t) => {
                    w.codes(&format!("{p}.table"), t);
                    LayerDesc::Embedding { table: format!("{p}.table") }
                }
                IntLayer::Lstm(c) => {
                    w.cell(&p, c);
                    LayerDesc::Lstm { cell: p }
                }
                IntLayer::MadNormLstm(c) => {
                    w.cell(&p, c);
                    LayerDesc::MadnormLstm { cell: p }
                }
                IntLayer::BiLstm(b) => {
                    let (f, r) = (format!("{p}.fwd"), format!("{p}.bwd"));
                    w.cell(&f, b.fwd());
                    w.cell(&r, b.bwd());
                    LayerDesc::Bilstm { fwd: f, bwd: r }
                }
                IntLayer::AttentionDecoder { memory, cell, attention } => {
                    let a = format!("{p}.att");
                    w.cell(&p, cell);
                    w.attention(&a, attention);
                    LayerDesc::AttentionDecoder {
                        memory: *memory,
                        cell: p,
                        attention: a,
                    }
                }
                IntLayer::ResidualAdd(r) => {
                    let (a, b, o) = r.qparams();
                    w.qp(&format!("{p}.a"), a);
                    w.qp(&format!("{p}.b"), b);
                    w.qp(&format!("{p}.out"), o);
                    LayerDesc::ResidualAdd { from: r.from(), params: p }
                }
                IntLayer::FinalProjection(proj) => {
                    let name = format!("{p}.w");
                    w.matrix(&name, proj.matrix());
                    w.qp(&format!("{name}.in"), proj.in_qp());
                    LayerDesc::FinalProjection { weights: name }
                }
            });
        }
        w.finish(path, ModelKind::Int, input, Some(self.config()), layers)
    }

    /// Reads a model written by [`IntModel::save`], verifying version,
    /// checksum, tensor bounds and parameter sharing.
    pub fn load(path: &Path) -> Result<Self> {
        let r = Reader::open(path)?;
        let m = &r.manifest;
        if m.kind != ModelKind::Int {
            return Err(invalid("manifest holds a float model".into()));
        }
        let input = match m.input {
            InputDesc::Tokens { vocab } => IntInput::Tokens { vocab },
            InputDesc::Features { dim } => IntInput::Features {
                dim,
                qp: r.qp(INPUT_STAGE)?,
            },
        };
        let mut layers = Vec::with_capacity(m.layers.len());
        for l in &m.layers {
            layers.push(match l {
                LayerDesc::Embedding { table } => IntLayer::Embedding(r.codes(table)?),
                LayerDesc::Lstm { cell } => IntLayer::Lstm(r.cell(cell)?),
                LayerDesc::MadnormLstm { cell } => IntLayer::MadNormLstm(r.cell(cell)?),
                LayerDesc::Bilstm { fwd, bwd } => IntLayer::BiLstm(IntBiLstm::new(r.cell(fwd)?, r.cell(bwd)?)?),
                LayerDesc::AttentionDecoder { memory, cell, attention } => IntLayer::AttentionDecoder {
                    memory: *memory,
                    cell: r.cell(cell)?,
                    attention: r.attention(attention)?,
                },
                LayerDesc::ResidualAdd { from, params } => IntLayer::ResidualAdd(IntResidual::new(
                    *from,
                    r.qp(&format!("{params}.a"))?,
                    r.qp(&format!("{params}.b"))?,
                    r.qp(&format!("{params}.out"))?,
                )?),
                LayerDesc::FinalProjection { weights } => {
                    IntLayer::FinalProjection(IntProjection::new(r.matrix(weights)?, r.qp(&format!("{weights}.in"))?)?)
                }
            });
        }
        let config = m.config.ok_or_else(|| invalid("integer manifest lacks its conversion config".into()))?;
        IntModel::new(input, layers, config)
    }
}

impl FloatModel {
    /// Writes the manifest to `path` and `f32` weights next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::default();
        let input = match self.input() {
            ModelInput::Tokens { vocab } => InputDesc::Tokens { vocab },
            ModelInput::Features { dim } => InputDesc::Features { dim },
        };
        let mut layers = Vec::with_capacity(self.layers().len());
        for (i, l) in self.layers().iter().enumerate() {
            let p = layer_prefix(i);
            layers.push(match l {
                FloatLayer::Embedding { vocab, dim, table } => {
                    let name = format!("{p}.table");
                    w.f32s(&name, vec![*vocab, *dim], table);
                    LayerDesc::Embedding { table: name }
                }
                FloatLayer::Lstm(lw) => {
                    w.lstm_f32(&p, lw);
                    LayerDesc::Lstm { cell: p }
                }
                FloatLayer::MadNormLstm { weights, norm } => {
                    w.lstm_f32(&p, weights);
                    for (k, v) in [
                        ("gamma_x", &norm.gamma_x),
                        ("beta_x", &norm.beta_x),
                        ("gamma_h", &norm.gamma_h),
                        ("beta_h", &norm.beta_h),
                        ("gamma_c", &norm.gamma_c),
                        ("beta_c", &norm.beta_c),
                    ] {
                        w.f32s(&format!("{p}.{k}"), vec![v.len()], v);
                    }
                    LayerDesc::MadnormLstm { cell: p }
                }
                FloatLayer::BiLstm { fwd, bwd } => {
                    let (f, r) = (format!("{p}.fwd"), format!("{p}.bwd"));
                    w.lstm_f32(&f, fwd);
                    w.lstm_f32(&r, bwd);
                    LayerDesc::Bilstm { fwd: f, bwd: r }
                }
                FloatLayer::AttentionDecoder { memory, cell, attention } => {
                    let a = format!("{p}.att");
                    w.lstm_f32(&p, cell);
                    w.f32s(&format!("{a}.w_q"), vec![attention.m_att, attention.m_dec], &attention.w_q);
                    w.f32s(&format!("{a}.w_k"), vec![attention.m_att, attention.m_enc], &attention.w_k);
                    w.f32s(&format!("{a}.v"), vec![attention.m_att], &attention.v);
                    w.f32s(&format!("{a}.w_s"), vec![4 * attention.m_dec, attention.m_enc], &attention.w_s);
                    LayerDesc::AttentionDecoder {
                        memory: *memory,
                        cell: p,
                        attention: a,
                    }
                }
                FloatLayer::ResidualAdd { from } => LayerDesc::ResidualAdd { from: *from, params: p },
                FloatLayer::FinalProjection { rows, cols, w: pw, bias } => {
                    let name = format!("{p}.w");
                    w.f32s(&name, vec![*rows, *cols], pw);
                    w.f32s(&format!("{name}.bias"), vec![*rows], bias);
                    LayerDesc::FinalProjection { weights: name }
                }
            });
        }
        w.finish(path, ModelKind::Float, input, None, layers)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = Reader::open(path)?;
        let m = &r.manifest;
        if m.kind != ModelKind::Float {
            return Err(invalid("manifest holds an integer model".into()));
        }
        let input = match m.input {
            InputDesc::Tokens { vocab } => ModelInput::Tokens { vocab },
            InputDesc::Features { dim } => ModelInput::Features { dim },
        };
        let mut layers = Vec::with_capacity(m.layers.len());
        for l in &m.layers {
            layers.push(match l {
                LayerDesc::Embedding { table } => {
                    let (vocab, dim, table) = r.f32_2d(table)?;
                    FloatLayer::Embedding { vocab, dim, table }
                }
                LayerDesc::Lstm { cell } => FloatLayer::Lstm(r.lstm_f32(cell)?),
                LayerDesc::MadnormLstm { cell } => {
                    let v = |k: &str| Ok::<_, IrnnError>(r.f32s(&format!("{cell}.{k}"))?.1);
                    FloatLayer::MadNormLstm {
                        weights: r.lstm_f32(cell)?,
                        norm: NormWeights {
                            gamma_x: v("gamma_x")?,
                            beta_x: v("beta_x")?,
                            gamma_h: v("gamma_h")?,
                            beta_h: v("beta_h")?,
                            gamma_c: v("gamma_c")?,
                            beta_c: v("beta_c")?,
                        },
                    }
                }
                LayerDesc::Bilstm { fwd, bwd } => FloatLayer::BiLstm {
                    fwd: r.lstm_f32(fwd)?,
                    bwd: r.lstm_f32(bwd)?,
                },
                LayerDesc::AttentionDecoder { memory, cell, attention } => {
                    let (m_att, m_dec, w_q) = r.f32_2d(&format!("{attention}.w_q"))?;
                    let (_, m_enc, w_k) = r.f32_2d(&format!("{attention}.w_k"))?;
                    let (_, v) = r.f32s(&format!("{attention}.v"))?;
                    let (_, _, w_s) = r.f32_2d(&format!("{attention}.w_s"))?;
                    FloatLayer::AttentionDecoder {
                        memory: *memory,
                        cell: r.lstm_f32(cell)?,
                        attention: AttentionWeights::new(m_att, m_dec, m_enc, w_q, w_k, v, w_s)?,
                    }
                }
                LayerDesc::ResidualAdd { from, .. } => FloatLayer::ResidualAdd { from: *from },
                LayerDesc::FinalProjection { weights } => {
                    let (rows, cols, w) = r.f32_2d(weights)?;
                    let (_, bias) = r.f32s(&format!("{weights}.bias"))?;
                    FloatLayer::FinalProjection { rows, cols, w, bias }
                }
            });
        }
        FloatModel::new(input, layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::int_model::{convert, IntSequence};
    use crate::runtime::model::{ArchSpec, Sequence};
    use crate::runtime::calibrate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn models(seed: u64) -> (FloatModel, IntModel, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ArchSpec {
            input: ModelInput::Tokens { vocab: 20 },
            embed: 6,
            hidden: 6,
            layers: 2,
            madnorm: true,
            residual: true,
            attention: Some(4),
            output: Some(5),
            scale: 0.4,
            ..ArchSpec::default()
        };
        let fm = FloatModel::random(&spec, &mut rng).unwrap();
        let data: Vec<Vec<usize>> = (0..4).map(|_| (0..9).map(|_| rng.random_range(0..20)).collect()).collect();
        let batches: Vec<Sequence<'_>> = data.iter().map(|d| Sequence::Tokens(d)).collect();
        let q = calibrate(&fm, &batches).unwrap();
        let im = convert(&fm, &q, &ConvertConfig::default()).unwrap();
        (fm, im, data[0].clone())
    }

    #[test]
    fn int_round_trip_is_bit_exact() {
        let (_, im, tokens) = models(1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        im.save(&p).unwrap();
        assert_eq!(model_kind(&p).unwrap(), ModelKind::Int);
        let back = IntModel::load(&p).unwrap();
        assert_eq!(back, im);
        assert_eq!(
            back.run(IntSequence::Tokens(&tokens)).unwrap(),
            im.run(IntSequence::Tokens(&tokens)).unwrap()
        );
    }

    #[test]
    fn float_round_trip_is_exact() {
        let (fm, _, _) = models(2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.json");
        fm.save(&p).unwrap();
        assert_eq!(model_kind(&p).unwrap(), ModelKind::Float);
        assert_eq!(FloatModel::load(&p).unwrap(), fm);
        assert!(IntModel::load(&p).is_err());
    }

    #[test]
    fn rejects_bad_version_checksum_and_truncation() {
        let (_, im, _) = models(3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        im.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();

        std::fs::write(&p, text.replacen("\"version\": 1", "\"version\": 2", 1)).unwrap();
        assert!(matches!(IntModel::load(&p), Err(IrnnError::Version(2))));
        std::fs::write(&p, &text).unwrap();

        let bin = blob_path(&p);
        let mut blob = std::fs::read(&bin).unwrap();
        blob[17] ^= 0x40;
        std::fs::write(&bin, &blob).unwrap();
        assert!(matches!(IntModel::load(&p), Err(IrnnError::Checksum)));
        blob[17] ^= 0x40;

        blob.truncate(blob.len() / 2);
        std::fs::write(&bin, &blob).unwrap();
        assert!(matches!(IntModel::load(&p), Err(IrnnError::TruncatedBlob { .. })));
    }

    #[test]
    fn rejects_tensor_past_blob_end() {
        let (_, im, _) = models(4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        im.save(&p).unwrap();
        let mut m: Manifest = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        let e = m.tensors.values_mut().next().unwrap();
        e.offset = m.blob.length;
        std::fs::write(&p, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(IntModel::load(&p), Err(IrnnError::TruncatedBlob { .. })));
    }

    #[test]
    fn rejects_mismatched_shared_parameters() {
        let (_, im, _) = models(5);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        im.save(&p).unwrap();
        let mut m: Manifest = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        let other = QuantParams::new(-3.0, 3.0, BitWidth::B8).unwrap();
        m.qparams.insert("L1.x".into(), other);
        std::fs::write(&p, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(IntModel::load(&p).is_err());
    }
}
