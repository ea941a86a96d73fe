//! Encoding of trees, MPS and trained heads into [`Container`]s.

use arbor_core::models::{CurtainModel, LinearClassifier, TopTensor};
use arbor_core::tree::{Isometry, LayerStats, TreeLayer, TreeMeta, TreeNetwork};
use arbor_core::{DenseTensor, LocalMap, Mps, ScaleMode};
use serde_json::{json, Value};

use crate::container::Container;
use crate::error::{Error, Result};

pub const KIND_TREE: &str = "tree";
pub const KIND_MPS: &str = "mps";
pub const KIND_TOP: &str = "top-model";
pub const KIND_CURTAIN: &str = "curtain-model";

fn bad(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

fn field<'a>(v: &'a Value, key: &str) -> Result<&'a Value> {
    v.get(key).ok_or_else(|| bad(format!("container metadata lacks '{key}'")))
}

fn usizes(v: &Value) -> Result<Vec<usize>> {
    serde_json::from_value(v.clone()).map_err(|e| bad(format!("bad dimension list: {e}")))
}

fn tensor(c: &Container, name: &str) -> Result<DenseTensor> {
    let (shape, data) = c.array(name)?;
    Ok(DenseTensor::new(shape.to_vec(), data.to_vec())?)
}

pub fn put_tree(c: &mut Container, tree: &TreeNetwork) {
    let m = tree.meta();
    let layers: Vec<Value> = tree
        .layers()
        .iter()
        .zip(&m.stats)
        .map(|(l, s)| {
            json!({
                "in_dims": l.in_dims(),
                "out_dims": l.out_dims(),
                "passthrough": l.passthrough(),
                "pair_samples": s.pair_samples,
            })
        })
        .collect();
    c.set_meta(
        "tree",
        json!({
            "input_dims": tree.input_dims(),
            "cutoff": m.cutoff,
            "max_dim": m.max_dim,
            "map": m.map.name(),
            "scale_mode": m.scale_mode.name(),
            "mu": m.mu,
            "layers": layers,
        }),
    );
    let mut fidelity = Vec::new();
    for (l, layer) in tree.layers().iter().enumerate() {
        for (i, iso) in layer.isometries().iter().enumerate() {
            c.push(format!("tree.l{l}.u{i}"), iso.tensor().shape().to_vec(), iso.tensor().data().to_vec());
            c.push(format!("tree.l{l}.u{i}.spectrum"), vec![iso.spectrum().len()], iso.spectrum().to_vec());
            c.push(format!("tree.l{l}.u{i}.error"), vec![1], vec![iso.truncation_error()]);
        }
    }
    for s in &m.stats {
        fidelity.extend([s.log_fidelity_in, s.log_fidelity_out]);
    }
    c.push("tree.log_fidelity", vec![m.stats.len(), 2], fidelity);
}

pub fn get_tree(c: &Container) -> Result<TreeNetwork> {
    let meta = field(c.meta(), "tree")?;
    let input_dims = usizes(field(meta, "input_dims")?)?;
    let layer_meta = field(meta, "layers")?.as_array().ok_or_else(|| bad("tree layers must be a list"))?;
    let (_, fid) = c.array("tree.log_fidelity")?;
    if fid.len() != 2 * layer_meta.len() {
        return Err(bad("fidelity table does not match the layer count"));
    }
    let mut layers = Vec::with_capacity(layer_meta.len());
    let mut stats = Vec::with_capacity(layer_meta.len());
    for (l, lm) in layer_meta.iter().enumerate() {
        let in_dims = usizes(field(lm, "in_dims")?)?;
        let isos = (0..in_dims.len() / 2)
            .map(|i| {
                let t = tensor(c, &format!("tree.l{l}.u{i}"))?;
                let spectrum = c.array(&format!("tree.l{l}.u{i}.spectrum"))?.1.to_vec();
                let err = c.array(&format!("tree.l{l}.u{i}.error"))?.1[0];
                Ok(Isometry::new(t, err, spectrum)?)
            })
            .collect::<Result<Vec<_>>>()?;
        layers.push(TreeLayer::new(in_dims, isos)?);
        stats.push(LayerStats {
            pair_samples: serde_json::from_value(field(lm, "pair_samples")?.clone())
                .map_err(|e| bad(format!("bad sample counts: {e}")))?,
            log_fidelity_in: fid[2 * l],
            log_fidelity_out: fid[2 * l + 1],
        });
    }
    let text = |k: &str| -> Result<String> {
        Ok(field(meta, k)?.as_str().ok_or_else(|| bad(format!("'{k}' must be a string")))?.to_string())
    };
    let number = |k: &str| -> Result<f64> { field(meta, k)?.as_f64().ok_or_else(|| bad(format!("'{k}' must be a number"))) };
    let tree_meta = TreeMeta {
        cutoff: number("cutoff")?,
        max_dim: serde_json::from_value(field(meta, "max_dim")?.clone()).map_err(|e| bad(e.to_string()))?,
        map: text("map")?.parse::<LocalMap>()?,
        scale_mode: text("scale_mode")?.parse::<ScaleMode>()?,
        mu: number("mu")?,
        stats,
    };
    Ok(TreeNetwork::new(input_dims, layers, tree_meta)?)
}

pub fn put_mps(c: &mut Container, prefix: &str, w: &Mps) {
    c.set_meta(prefix, json!({ "sites": w.site_count(), "label_dim": w.label_dim() }));
    for (k, t) in w.tensors().iter().enumerate() {
        c.push(format!("{prefix}.t{k}"), t.shape().to_vec(), t.data().to_vec());
    }
}

pub fn get_mps(c: &Container, prefix: &str) -> Result<Mps> {
    let meta = field(c.meta(), prefix)?;
    let n = field(meta, "sites")?.as_u64().ok_or_else(|| bad("site count must be an integer"))? as usize;
    let label: Option<usize> = serde_json::from_value(field(meta, "label_dim")?.clone()).map_err(|e| bad(e.to_string()))?;
    let tensors = (0..n).map(|k| tensor(c, &format!("{prefix}.t{k}"))).collect::<Result<Vec<_>>>()?;
    Ok(Mps::new(tensors, label)?)
}

pub fn put_top(c: &mut Container, top: &TopTensor) {
    let w = top.weights();
    c.push("top.weights", w.shape().to_vec(), w.data().to_vec());
    c.push("top.trace", vec![top.trace().len()], top.trace().to_vec());
}

pub fn get_top(c: &Container) -> Result<TopTensor> {
    let trace = c.array("top.trace").map(|(_, t)| t.to_vec()).unwrap_or_default();
    Ok(TopTensor::new(tensor(c, "top.weights")?)?.with_trace(trace))
}

pub fn put_linear(c: &mut Container, clf: &LinearClassifier) {
    let (l, n) = (clf.classes(), clf.input_dim());
    c.push("linear.weights", vec![l, n], clf.weights.iter().flatten().copied().collect());
    c.push("linear.biases", vec![l], clf.biases.clone());
}

pub fn get_linear(c: &Container) -> Result<LinearClassifier> {
    let (shape, w) = c.array("linear.weights")?;
    let (_, b) = c.array("linear.biases")?;
    let n = shape[1];
    Ok(LinearClassifier { weights: w.chunks(n.max(1)).map(<[f64]>::to_vec).collect(), biases: b.to_vec() })
}

/// A trained model ready for evaluation.
#[derive(Debug, Clone)]
pub enum Model {
    /// Full tree with a top tensor.
    Top { tree: TreeNetwork, top: TopTensor },
    /// Partial tree with an MPS head.
    Curtain(CurtainModel),
    /// An MPS over the raw input sites (e.g. a lifted linear classifier).
    Mps { mps: Mps, map: LocalMap },
}

pub fn top_container(tree: &TreeNetwork, top: &TopTensor) -> Container {
    let mut c = Container::new(KIND_TOP);
    put_tree(&mut c, tree);
    put_top(&mut c, top);
    c
}

pub fn curtain_container(model: &CurtainModel) -> Container {
    let mut c = Container::new(KIND_CURTAIN);
    put_tree(&mut c, model.tree());
    put_mps(&mut c, "head", model.top());
    c
}

pub fn tree_container(tree: &TreeNetwork) -> Container {
    let mut c = Container::new(KIND_TREE);
    put_tree(&mut c, tree);
    c
}

pub fn mps_container(w: &Mps, map: LocalMap) -> Container {
    let mut c = Container::new(KIND_MPS);
    c.set_meta("map", json!(map.name()));
    put_mps(&mut c, "mps", w);
    c
}

pub fn load_model(c: &Container) -> Result<Model> {
    match c.kind() {
        KIND_TOP => Ok(Model::Top { tree: get_tree(c)?, top: get_top(c)? }),
        KIND_CURTAIN => Ok(Model::Curtain(CurtainModel::new(get_tree(c)?, get_mps(c, "head")?)?)),
        KIND_MPS => {
            let map = field(c.meta(), "map")?.as_str().unwrap_or("affine").parse::<LocalMap>()?;
            Ok(Model::Mps { mps: get_mps(c, "mps")?, map })
        }
        other => Err(bad(format!("container of kind '{other}' is not a trained model"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use arbor_core::mps::lift_linear_classes;
    use arbor_core::tree::build_tree;
    use arbor_core::{map_input, BuildConfig};
    use std::path::Path;

    fn small_tree() -> TreeNetwork {
        let xs: Vec<Vec<f64>> = (0..12).map(|i| (0..7).map(|k| ((i * 7 + k) % 11) as f64 / 10.0).collect()).collect();
        let mut fs: Vec<_> = xs.iter().map(|x| map_input(x, LocalMap::Affine, ScaleMode::UnitLocal).unwrap()).collect();
        let cfg = BuildConfig { cutoff: 1e-3, max_dim: Some(5), ..BuildConfig::default() };
        build_tree(&mut fs, LocalMap::Affine, &cfg, None).unwrap()
    }

    fn reload(c: &Container) -> Container {
        Container::from_bytes(Path::new("mem"), &c.to_bytes()).unwrap()
    }

    #[test]
    fn tree_round_trip() {
        let tree = small_tree();
        let back = get_tree(&reload(&tree_container(&tree))).unwrap();
        assert_eq!(back, tree);
    }

    #[test]
    fn mps_and_heads_round_trip() {
        let w = lift_linear_classes(&[vec![0.5, -1.0, 0.25], vec![0.0, 2.0, 1.0]], &[0.1, -0.2], LocalMap::Affine).unwrap();
        match load_model(&reload(&mps_container(&w, LocalMap::Affine))).unwrap() {
            Model::Mps { mps, map } => {
                assert_eq!(mps, w);
                assert_eq!(map, LocalMap::Affine);
            }
            other => panic!("{other:?}"),
        }
        let tree = small_tree();
        let dims = tree.output_dims();
        let top = TopTensor::new(DenseTensor::new(vec![2, dims[0], dims[1]], (0..2 * dims[0] * dims[1]).map(|v| v as f64 / 3.0).collect()).unwrap()).unwrap();
        match load_model(&reload(&top_container(&tree, &top))).unwrap() {
            Model::Top { tree: t, top: h } => {
                assert_eq!(t, tree);
                assert_eq!(h.weights(), top.weights());
            }
            other => panic!("{other:?}"),
        }
        let clf = LinearClassifier { weights: vec![vec![1.0, 2.0], vec![3.0, 4.0]], biases: vec![0.5, -0.5] };
        let mut c = Container::new("linear");
        put_linear(&mut c, &clf);
        assert_eq!(get_linear(&reload(&c)).unwrap(), clf);
        assert!(load_model(&c).is_err());
    }
}
