//! Model persistence: a binary format carrying the architecture tag,
//! its configuration, and every registered tensor (including buffers
//! such as normalization running statistics) in registry order, all
//! little-endian with full f64 precision, so a round trip reproduces the
//! model bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array3, ArrayView3, IxDyn};
use num_complex::Complex64;

use crate::autodiff::Arr;
use crate::baselines::{CnnConfig, CnnPredictor, RnnConfig, RnnPredictor};
use crate::binio::{LeReader, LeWriter};
use crate::error::{Error, Result};
use crate::layers::Activation;
use crate::model::{
    predict_planes, AclConfig, Combine, Csi4CastConfig, Csi4CastModel, ModelDims, ShuffleConfig,
    TrainableModel, TransformerConfig,
};
use crate::types::Duplex;

const MAGIC: &[u8; 8] = b"C4CMODEL";
const VERSION: u32 = 1;

/// A trainable predictor of any supported architecture.
pub enum AnyModel {
    Csi4Cast(Csi4CastModel),
    Rnn(RnnPredictor),
    Cnn(CnnPredictor),
}

impl AnyModel {
    pub fn kind_name(&self) -> &'static str {
        match self {
            AnyModel::Csi4Cast(_) => "csi4cast",
            AnyModel::Rnn(_) => "rnn",
            AnyModel::Cnn(_) => "cnn",
        }
    }

    fn kind_code(&self) -> u8 {
        match self {
            AnyModel::Csi4Cast(_) => 0,
            AnyModel::Rnn(_) => 1,
            AnyModel::Cnn(_) => 2,
        }
    }

    pub fn as_trainable(&self) -> &dyn TrainableModel {
        match self {
            AnyModel::Csi4Cast(m) => m,
            AnyModel::Rnn(m) => m,
            AnyModel::Cnn(m) => m,
        }
    }

    pub fn as_trainable_mut(&mut self) -> &mut dyn TrainableModel {
        match self {
            AnyModel::Csi4Cast(m) => m,
            AnyModel::Rnn(m) => m,
            AnyModel::Cnn(m) => m,
        }
    }

    pub fn predict(&mut self, history: ArrayView3<'_, Complex64>) -> Array3<Complex64> {
        predict_planes(self.as_trainable_mut(), history)
    }
}

pub fn save_model(model: &AnyModel, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = LeWriter::new(BufWriter::new(file));
    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    w.u8(model.kind_code())?;

    let t = model.as_trainable();
    write_dims(&mut w, t.dims())?;
    match model {
        AnyModel::Csi4Cast(m) => write_csi4cast_config(&mut w, &m.config)?,
        AnyModel::Rnn(m) => w.u32(m.config.hidden as u32)?,
        AnyModel::Cnn(m) => {
            w.u32(m.config.features as u32)?;
            w.u32(m.config.depth as u32)?;
            w.u32(m.config.kernel as u32)?;
        }
    }

    let entries = t.registry().entries();
    w.u32(entries.len() as u32)?;
    for entry in entries {
        write_string(&mut w, &entry.name)?;
        w.u8(u8::from(entry.trainable))?;
        let arr = t.tape().value(entry.var);
        w.u8(arr.ndim() as u8)?;
        for d in arr.shape() {
            w.u32(*d as u32)?;
        }
        for v in arr.iter() {
            w.f64(*v)?;
        }
    }
    w.finish()
}

pub fn load_model(path: &Path) -> Result<AnyModel> {
    let file = File::open(path)?;
    let mut r = LeReader::new(BufReader::new(file));
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let kind = r.u8()?;
    let dims = read_dims(&mut r)?;
    let mut model = match kind {
        0 => {
            let config = read_csi4cast_config(&mut r)?;
            AnyModel::Csi4Cast(Csi4CastModel::new(dims, config, 0)?)
        }
        1 => {
            let hidden = r.u32()? as usize;
            AnyModel::Rnn(RnnPredictor::new(dims, RnnConfig { hidden }, 0)?)
        }
        2 => {
            let features = r.u32()? as usize;
            let depth = r.u32()? as usize;
            let kernel = r.u32()? as usize;
            AnyModel::Cnn(CnnPredictor::new(dims, CnnConfig { features, depth, kernel }, 0)?)
        }
        other => return Err(Error::InvalidEncoding(format!("model kind {other}"))),
    };

    let t = model.as_trainable_mut();
    let n_tensors = r.u32()? as usize;
    let expected: Vec<_> = t
        .registry()
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.trainable, e.var))
        .collect();
    if n_tensors != expected.len() {
        return Err(Error::dim(
            "checkpoint tensor count",
            expected.len().to_string(),
            n_tensors.to_string(),
        ));
    }
    for (name, trainable, var) in expected {
        let stored_name = read_string(&mut r)?;
        if stored_name != name {
            return Err(Error::dim("checkpoint tensor name", name, stored_name));
        }
        let stored_trainable = r.u8()? != 0;
        if stored_trainable != trainable {
            return Err(Error::InvalidEncoding(format!(
                "tensor {name} trainable flag {stored_trainable}"
            )));
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let want = t.tape().value(var).shape().to_vec();
        if shape != want {
            return Err(Error::dim(
                "checkpoint tensor shape",
                format!("{name} {want:?}"),
                format!("{name} {shape:?}"),
            ));
        }
        let mut data = Vec::with_capacity(shape.iter().product());
        for _ in 0..shape.iter().product::<usize>() {
            data.push(r.f64()?);
        }
        let arr = Arr::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::InvalidEncoding(format!("tensor {name}: {e}")))?;
        t.tape_mut().set_value(var, arr);
    }
    Ok(model)
}

fn write_dims<W: Write>(w: &mut LeWriter<W>, dims: ModelDims) -> Result<()> {
    w.u32(dims.hist_len as u32)?;
    w.u32(dims.pred_len as u32)?;
    w.u32(dims.n_sc as u32)
}

fn read_dims<R: Read>(r: &mut LeReader<R>) -> Result<ModelDims> {
    Ok(ModelDims {
        hist_len: r.u32()? as usize,
        pred_len: r.u32()? as usize,
        n_sc: r.u32()? as usize,
    })
}

fn write_string<W: Write>(w: &mut LeWriter<W>, s: &str) -> Result<()> {
    w.u32(s.len() as u32)?;
    w.bytes(s.as_bytes())
}

fn read_string<R: Read>(r: &mut LeReader<R>) -> Result<String> {
    let len = r.u32()? as usize;
    if len > 4096 {
        return Err(Error::InvalidEncoding(format!("string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.fill(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::InvalidEncoding(format!("string: {e}")))
}

fn write_acl<W: Write>(w: &mut LeWriter<W>, cfg: &AclConfig) -> Result<()> {
    w.u32(cfg.hidden_layers as u32)?;
    w.u32(cfg.hidden_dim as u32)?;
    write_string(w, &cfg.out_activation.to_string())?;
    write_string(w, &cfg.combine.to_string())
}

fn read_acl<R: Read>(r: &mut LeReader<R>) -> Result<AclConfig> {
    Ok(AclConfig {
        hidden_layers: r.u32()? as usize,
        hidden_dim: r.u32()? as usize,
        out_activation: Activation::from_str(&read_string(r)?)?,
        combine: Combine::from_str(&read_string(r)?)?,
    })
}

fn write_csi4cast_config<W: Write>(w: &mut LeWriter<W>, cfg: &Csi4CastConfig) -> Result<()> {
    w.u8(cfg.duplex.code())?;
    w.u32(cfg.cnn_depth as u32)?;
    w.u32(cfg.cnn_kernel as u32)?;
    w.u8(u8::from(cfg.cnn_residual))?;
    write_string(w, &cfg.cnn_activation.to_string())?;
    write_acl(w, &cfg.acl_time)?;
    write_acl(w, &cfg.acl_subcarrier)?;
    w.u32(cfg.shuffle.feature_maps as u32)?;
    w.u32(cfg.shuffle.groups as u32)?;
    w.u32(cfg.shuffle.dw_kernel as u32)?;
    w.u32(cfg.shuffle.blocks as u32)?;
    w.f64(cfg.shuffle.dropout)?;
    w.u32(cfg.transformer.latent_dim as u32)?;
    w.u32(cfg.transformer.layers as u32)?;
    w.u32(cfg.transformer.heads as u32)?;
    w.u32(cfg.transformer.ffn_hidden as u32)?;
    w.f64(cfg.transformer.dropout)
}

fn read_csi4cast_config<R: Read>(r: &mut LeReader<R>) -> Result<Csi4CastConfig> {
    Ok(Csi4CastConfig {
        duplex: Duplex::from_code(r.u8()?)?,
        cnn_depth: r.u32()? as usize,
        cnn_kernel: r.u32()? as usize,
        cnn_residual: r.u8()? != 0,
        cnn_activation: Activation::from_str(&read_string(r)?)?,
        acl_time: read_acl(r)?,
        acl_subcarrier: read_acl(r)?,
        shuffle: ShuffleConfig {
            feature_maps: r.u32()? as usize,
            groups: r.u32()? as usize,
            dw_kernel: r.u32()? as usize,
            blocks: r.u32()? as usize,
            dropout: r.f64()?,
        },
        transformer: TransformerConfig {
            latent_dim: r.u32()? as usize,
            layers: r.u32()? as usize,
            heads: r.u32()? as usize,
            ffn_hidden: r.u32()? as usize,
            dropout: r.f64()?,
        },
    })
}
