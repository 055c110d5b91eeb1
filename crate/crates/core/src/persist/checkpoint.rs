use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::equinet::{
    build_pinn1d, build_pinn2d, BetaNetParams, FcParams, FcSpec, Init, Parameterized, Pinn1dSpec,
    Pinn2dSpec,
};
use crate::intercoord::{IcModel, IcNet};
use crate::numcore::{Activation, BatchNormState};
use crate::pra::PraNets;
use crate::rng;
use crate::{Error, Result};

const FORMAT: &str = "pinn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Any trained model the toolkit can persist.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Pra(PraNets),
    Ic(IcModel),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Pra(_) => "pra-pinn1d",
            Model::Ic(IcModel { net: IcNet::Pinn { .. }, .. }) => "ic-pinn2d",
            Model::Ic(IcModel { net: IcNet::Fc { .. }, .. }) => "ic-fc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BetaSpec {
    hidden: usize,
    bias: bool,
    activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormSpec {
    features: usize,
    momentum: f64,
    eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum SpecEcho {
    Pra {
        primal: Pinn1dSpec,
        beta: Option<BetaSpec>,
        dual: FcSpec,
        k_max: usize,
        t_f: usize,
        n_b: usize,
    },
    IcPinn {
        blocks: Pinn2dSpec,
        beta: Option<BetaSpec>,
        norm: NormSpec,
    },
    IcFc {
        fc: FcSpec,
        k: usize,
        norm: NormSpec,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format: String,
    version: u32,
    kind: String,
    spec: SpecEcho,
    params: BTreeMap<String, Vec<f64>>,
}

fn beta_spec(b: &BetaNetParams) -> BetaSpec {
    BetaSpec { hidden: b.hidden(), bias: b.b1.is_some(), activation: b.hidden_activation }
}

fn fc_spec(p: &FcParams) -> FcSpec {
    let mut widths = vec![p.in_width()];
    widths.extend(p.layers.iter().map(|l| l.w.rows()));
    let output = p.layers.last().map_or(Activation::Identity, |l| l.activation);
    FcSpec {
        widths,
        hidden: if p.layers.len() > 1 { p.layers[0].activation } else { output },
        output,
        bias: p.layers.first().is_some_and(|l| l.b.is_some()),
    }
}

fn norm_spec(bn: &BatchNormState) -> NormSpec {
    NormSpec { features: bn.features(), momentum: bn.momentum, eps: bn.eps }
}

fn named(out: &mut BTreeMap<String, Vec<f64>>, prefix: &str, p: &impl Parameterized) {
    for (name, t) in p.tensor_names().into_iter().zip(p.tensors()) {
        out.insert(format!("{prefix}{name}"), t.data().to_vec());
    }
}

fn fill(
    params: &mut BTreeMap<String, Vec<f64>>,
    prefix: &str,
    p: &mut impl Parameterized,
) -> Result<()> {
    let names = p.tensor_names();
    for (name, t) in names.into_iter().zip(p.tensors_mut()) {
        let key = format!("{prefix}{name}");
        let v = params
            .remove(&key)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks array `{key}`")))?;
        if v.len() != t.len() {
            return Err(Error::Format(format!(
                "array `{key}` has {} values, the spec needs {}",
                v.len(),
                t.len()
            )));
        }
        t.data_mut().copy_from_slice(&v);
    }
    Ok(())
}

fn take_vec(params: &mut BTreeMap<String, Vec<f64>>, key: &str, len: usize) -> Result<Vec<f64>> {
    let v = params
        .remove(key)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks array `{key}`")))?;
    if v.len() != len {
        return Err(Error::Format(format!("array `{key}` has {} values, expected {len}", v.len())));
    }
    Ok(v)
}

fn build_beta(spec: &Option<BetaSpec>) -> Result<Option<BetaNetParams>> {
    spec.as_ref()
        .map(|b| {
            let mut p = BetaNetParams::build(b.hidden, b.bias, Init::Zero, &mut rng::seeded(0))?;
            p.hidden_activation = b.activation;
            Ok(p)
        })
        .transpose()
}

fn build_norm(spec: &NormSpec, params: &mut BTreeMap<String, Vec<f64>>) -> Result<BatchNormState> {
    let mut bn = BatchNormState::new(spec.features);
    bn.momentum = spec.momentum;
    bn.eps = spec.eps;
    bn.running_mean = take_vec(params, "bn.running_mean", spec.features)?;
    bn.running_var = take_vec(params, "bn.running_var", spec.features)?;
    Ok(bn)
}

fn to_document(model: &Model) -> Document {
    let mut params = BTreeMap::new();
    let spec = match model {
        Model::Pra(n) => {
            named(&mut params, "primal.", &n.primal);
            if let Some(b) = &n.beta {
                named(&mut params, "", b);
            }
            named(&mut params, "dual.", &n.dual);
            SpecEcho::Pra {
                primal: n.primal.spec(),
                beta: n.beta.as_ref().map(beta_spec),
                dual: fc_spec(&n.dual),
                k_max: n.k_max,
                t_f: n.t_f,
                n_b: n.n_b,
            }
        }
        Model::Ic(m) => {
            params.insert("bn.running_mean".into(), m.bn.running_mean.clone());
            params.insert("bn.running_var".into(), m.bn.running_var.clone());
            named(&mut params, "", m);
            match &m.net {
                IcNet::Pinn { params: p, beta } => SpecEcho::IcPinn {
                    blocks: p.spec(),
                    beta: beta.as_ref().map(beta_spec),
                    norm: norm_spec(&m.bn),
                },
                IcNet::Fc { params: p, k } => SpecEcho::IcFc { fc: fc_spec(p), k: *k, norm: norm_spec(&m.bn) },
            }
        }
    };
    Document { format: FORMAT.into(), version: CHECKPOINT_VERSION, kind: model.kind().into(), spec, params }
}

fn from_document(doc: Document) -> Result<Model> {
    if doc.format != FORMAT {
        return Err(Error::Format(format!("not a checkpoint (format `{}`)", doc.format)));
    }
    if doc.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            doc.version
        )));
    }
    let mut params = doc.params;
    let z = &mut rng::seeded(0);
    let model = match doc.spec {
        SpecEcho::Pra { primal, beta, dual, k_max, t_f, n_b } => {
            let mut nets = PraNets {
                primal: build_pinn1d(&primal, Init::Zero, z)?,
                beta: build_beta(&beta)?,
                dual: dual.build(Init::Zero, z)?,
                k_max,
                t_f,
                n_b,
            };
            fill(&mut params, "primal.", &mut nets.primal)?;
            if let Some(b) = &mut nets.beta {
                fill(&mut params, "", b)?;
            }
            fill(&mut params, "dual.", &mut nets.dual)?;
            Model::Pra(nets)
        }
        SpecEcho::IcPinn { blocks, beta, norm } => {
            let bn = build_norm(&norm, &mut params)?;
            let net = IcNet::Pinn { params: build_pinn2d(&blocks, Init::Zero, z)?, beta: build_beta(&beta)? };
            let mut m = IcModel { net, bn };
            fill(&mut params, "", &mut m)?;
            Model::Ic(m)
        }
        SpecEcho::IcFc { fc, k, norm } => {
            let bn = build_norm(&norm, &mut params)?;
            let mut m = IcModel { net: IcNet::Fc { params: fc.build(Init::Zero, z)?, k }, bn };
            fill(&mut params, "", &mut m)?;
            Model::Ic(m)
        }
    };
    if model.kind() != doc.kind {
        return Err(Error::Format(format!(
            "checkpoint kind `{}` does not match its spec (`{}`)",
            doc.kind,
            model.kind()
        )));
    }
    if let Some(extra) = params.keys().next() {
        return Err(Error::Format(format!("checkpoint has unexpected array `{extra}`")));
    }
    Ok(model)
}

pub fn checkpoint_to_string(model: &Model) -> String {
    serde_json::to_string_pretty(&to_document(model)).expect("checkpoint serializes")
}

pub fn checkpoint_from_str(text: &str) -> Result<Model> {
    let doc: Document = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    from_document(doc)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}

/// Loads a checkpoint and insists on the given kind.
pub fn load_checkpoint_kind(path: &Path, kind: &str) -> Result<Model> {
    let m = load_checkpoint(path)?;
    if m.kind() != kind {
        return Err(Error::Format(format!("checkpoint holds a `{}` model, expected `{kind}`", m.kind())));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intercoord::{build_ic_fc, build_ic_pinn, generate_channels};
    use crate::pra::{build_pra_nets, infer_plan, make_pra_dataset, PraConfig, PraHyper};
    use crate::rng::seeded;

    #[test]
    fn ic_models_round_trip_exactly() {
        let mut pinn = build_ic_pinn(&[1, 3, 3, 1], Activation::Relu, true, &mut seeded(1)).unwrap();
        pinn.bn.running_mean = vec![0.123456789];
        pinn.bn.running_var = vec![1.0 / 3.0];
        let fc = build_ic_fc(4, &[7], Activation::Softplus, &mut seeded(2)).unwrap();
        let x = generate_channels(4, &mut seeded(3)).unwrap();
        for m in [pinn, fc] {
            let back = checkpoint_from_str(&checkpoint_to_string(&Model::Ic(m.clone()))).unwrap();
            let Model::Ic(b) = back else { panic!("kind changed") };
            assert_eq!(b, m);
            assert_eq!(b.predict(&[&x]).unwrap(), m.predict(&[&x]).unwrap());
        }
    }

    #[test]
    fn pra_round_trip_exactly() {
        let cfg = PraConfig { k_max: 3, t_f: 4, ..PraConfig::default() };
        let h = PraHyper { hidden: 5, dual_hidden: vec![6], ..PraHyper::default() };
        let nets = build_pra_nets(&cfg, &h, &mut seeded(0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        save_checkpoint(&p, &Model::Pra(nets.clone())).unwrap();
        let Model::Pra(b) = load_checkpoint(&p).unwrap() else { panic!("kind changed") };
        assert_eq!(b, nets);
        let s = &make_pra_dataset(&cfg, 1, None, 1).unwrap()[0];
        assert_eq!(infer_plan(&b, s).unwrap(), infer_plan(&nets, s).unwrap());
        assert!(load_checkpoint_kind(&p, "ic-pinn2d").is_err());
    }

    #[test]
    fn damaged_files_fail_cleanly() {
        let m = Model::Ic(build_ic_pinn(&[1, 2, 1], Activation::Relu, false, &mut seeded(1)).unwrap());
        let text = checkpoint_to_string(&m);
        assert!(matches!(checkpoint_from_str(&text[..text.len() / 2]), Err(Error::Parse { .. })));
        let v2 = text.replace("\"version\": 1", "\"version\": 2");
        assert!(checkpoint_from_str(&v2).unwrap_err().to_string().contains("version 2"));
        let wrong = text.replace("\"kind\": \"ic-pinn2d\"", "\"kind\": \"pra-pinn1d\"");
        assert!(checkpoint_from_str(&wrong).is_err());
    }
}
