//! Model checkpoints: the model configuration in the header and one f64 blob
//! per named parameter. Pretraining checkpoints also carry the `mtm.*` head.

use std::path::Path;

use tablet_core::masking::MtmHead;
use tablet_core::model::Param;
use tablet_core::{BrainTransformer, HeadKind, ModelConfig};

use crate::archive::{Archive, Tensor, TensorData};
use crate::{IoError, IoResult};

const MAGIC: &[u8; 8] = b"TBLCKPT1";

pub struct Checkpoint {
    pub model: BrainTransformer,
    pub mtm_head: Option<MtmHead>,
    pub meta: std::collections::BTreeMap<String, String>,
}

fn head_name(h: HeadKind) -> &'static str {
    match h {
        HeadKind::Binary => "binary",
        HeadKind::Regression => "regression",
    }
}

pub fn save_checkpoint(path: &Path, model: &BrainTransformer, mtm_head: Option<&MtmHead>, extra: &[(&str, String)]) -> IoResult<()> {
    let c = model.config();
    let mut a = Archive::default();
    let fields = [
        ("model.layers", c.layers.to_string()),
        ("model.heads", c.heads.to_string()),
        ("model.kv_heads", c.kv_heads.to_string()),
        ("model.dim", c.dim.to_string()),
        ("model.d_token", c.d_token.to_string()),
        ("model.t_frames", c.t_frames.to_string()),
        ("model.tokens_per_frame", c.tokens_per_frame.to_string()),
        ("model.head", head_name(c.head).to_string()),
        ("model.mlp_ratio", format!("{:?}", c.mlp_ratio)),
        ("model.rope", c.rope.to_string()),
        ("model.rope_base", format!("{:?}", c.rope_base)),
    ];
    for (k, v) in fields.into_iter().chain(extra.iter().map(|(k, v)| (*k, v.clone()))) {
        a.meta.insert(k.to_string(), v);
    }
    let params = model.params().iter().chain(mtm_head.map(|h| h.params()).unwrap_or(&[]));
    a.tensors = params.map(|p| Tensor { name: p.name.clone(), shape: p.shape.clone(), data: TensorData::F64(p.data.clone()) }).collect();
    a.write(path, MAGIC)
}

pub fn load_checkpoint(path: &Path) -> IoResult<Checkpoint> {
    let a = Archive::read(path, MAGIC)?;
    let config = ModelConfig {
        layers: a.meta_parse(path, "model.layers")?,
        heads: a.meta_parse(path, "model.heads")?,
        kv_heads: a.meta_parse(path, "model.kv_heads")?,
        dim: a.meta_parse(path, "model.dim")?,
        d_token: a.meta_parse(path, "model.d_token")?,
        t_frames: a.meta_parse(path, "model.t_frames")?,
        tokens_per_frame: a.meta_parse(path, "model.tokens_per_frame")?,
        head: a.meta_str(path, "model.head")?.parse()?,
        mlp_ratio: a.meta_parse(path, "model.mlp_ratio")?,
        rope: a.meta_parse(path, "model.rope")?,
        rope_base: a.meta_parse(path, "model.rope_base")?,
    };
    let mut model_params = Vec::new();
    let mut head_params = Vec::new();
    for t in a.tensors {
        let TensorData::F64(data) = t.data else {
            return Err(IoError::format(path, format!("parameter {} is not f64", t.name)));
        };
        let p = Param { name: t.name, shape: t.shape, data };
        if p.name.starts_with("mtm.") {
            head_params.push(p);
        } else {
            model_params.push(p);
        }
    }
    let model = BrainTransformer::from_params(config, model_params)?;
    let mtm_head = if head_params.is_empty() { None } else { Some(MtmHead::from_params(head_params)?) };
    let meta = a.meta.into_iter().filter(|(k, _)| !k.starts_with("model.")).collect();
    Ok(Checkpoint { model, mtm_head, meta })
}
