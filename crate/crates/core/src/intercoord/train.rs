use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::channel::{sum_rate, IcConfig};
use super::data::IcSample;
use crate::equinet::{
    build_pinn2d, BetaNetParams, FcParams, FcSpec, Init, Parameterized, Pinn2dParams, Pinn2dSpec,
};
use crate::numcore::{
    batch_norm, sigmoid, Activation, BatchNormState, BatchStats, NodeId, Optimizer, RmspropState,
    Tape, Tensor,
};
use crate::rng::Rng;
use crate::{Error, Result};

/// Network body of an interference-coordination model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum IcNet {
    /// PINN-2D over `1×1` blocks, optionally with the `beta_K` adapter.
    Pinn { params: Pinn2dParams, beta: Option<BetaNetParams> },
    /// Dense baseline on the flattened `K×K` channel, fixed `K`.
    Fc { params: FcParams, k: usize },
}

/// Network plus the batch-normalized sigmoid output head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcModel {
    pub net: IcNet,
    pub bn: BatchNormState,
}

/// PINN-2D with square blocks of sizes `dims` (first and last must be 1).
pub fn build_ic_pinn(dims: &[usize], hidden: Activation, adapt_k: bool, rng: &mut Rng) -> Result<IcModel> {
    if dims.len() < 2 || dims[0] != 1 || dims[dims.len() - 1] != 1 {
        return Err(Error::contract("PINN-2D block sizes must start and end at 1"));
    }
    let spec = Pinn2dSpec::square(dims, hidden, Activation::Identity);
    let params = build_pinn2d(&spec, Init::Uniform, rng)?;
    let beta = if adapt_k {
        Some(BetaNetParams::build(10, false, Init::Uniform, rng)?)
    } else {
        None
    };
    // one shared normalization feature keeps the head equivariant
    Ok(IcModel { net: IcNet::Pinn { params, beta }, bn: BatchNormState::new(1) })
}

/// Dense baseline `K² → hidden… → K`.
pub fn build_ic_fc(k: usize, hidden: &[usize], act: Activation, rng: &mut Rng) -> Result<IcModel> {
    let mut widths = vec![k * k];
    widths.extend(hidden);
    widths.push(k);
    let params = FcSpec { widths, hidden: act, output: Activation::Identity, bias: true }
        .build(Init::Uniform, rng)?;
    Ok(IcModel { net: IcNet::Fc { params, k }, bn: BatchNormState::new(k) })
}

impl IcModel {
    pub fn is_pinn(&self) -> bool {
        matches!(self.net, IcNet::Pinn { .. })
    }

    /// Records the pre-normalization output `[B × K]` (PINN: `[B·K × 1]`).
    fn record_body(&self, tape: &mut Tape, ids: &[NodeId], xs: &[&Tensor]) -> Result<NodeId> {
        let k = xs[0].rows();
        let b = xs.len();
        let mut flat = Vec::with_capacity(b * k * k);
        for x in xs {
            if x.shape() != [k, k] {
                return Err(Error::shape("a batch must share one K"));
            }
            flat.extend_from_slice(x.data());
        }
        match &self.net {
            IcNet::Pinn { params, beta } => {
                let n = params.tensors().len();
                let bid = match beta {
                    Some(bp) => Some(bp.record(tape, &ids[n..], k)?),
                    None => None,
                };
                let x = tape.leaf(Tensor::new(vec![b, k, k, 1, 1], flat)?);
                let out = params.record_readout(tape, &ids[..n], x, bid, true)?;
                tape.reshape(out, &[b * k, 1])
            }
            IcNet::Fc { params, k: kf } => {
                if k != *kf {
                    return Err(Error::shape(format!("dense model built for K = {kf}, got K = {k}")));
                }
                let x = tape.leaf(Tensor::new(vec![b, k * k], flat)?);
                params.record_pre_activation(tape, ids, x)
            }
        }
    }

    fn body_tensors(&self) -> Vec<&Tensor> {
        match &self.net {
            IcNet::Pinn { params, beta } => {
                let mut v = params.tensors();
                if let Some(bp) = beta {
                    v.extend(bp.tensors());
                }
                v
            }
            IcNet::Fc { params, .. } => params.tensors(),
        }
    }

    fn body_tensors_mut(net: &mut IcNet) -> Vec<&mut Tensor> {
        match net {
            IcNet::Pinn { params, beta } => {
                let mut v = params.tensors_mut();
                if let Some(bp) = beta {
                    v.extend(bp.tensors_mut());
                }
                v
            }
            IcNet::Fc { params, .. } => params.tensors_mut(),
        }
    }

    /// Training-mode forward: sigmoid(batch_norm(body)) as `[B × K]`.
    pub fn record_train(&self, tape: &mut Tape, xs: &[&Tensor]) -> Result<(Vec<NodeId>, NodeId, BatchStats)> {
        let ids = self.bind(tape);
        let n = ids.len() - 2;
        let z = self.record_body(tape, &ids[..n], xs)?;
        let (z, stats) = tape.batch_norm(z, ids[n], ids[n + 1], self.bn.eps)?;
        let y = tape.sigmoid(z);
        let y = tape.reshape(y, &[xs.len(), xs[0].rows()])?;
        Ok((ids, y, stats))
    }

    /// Inference with running statistics; one row of powers per input.
    pub fn predict(&self, xs: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape);
        let z = self.record_body(&mut tape, &ids[..ids.len() - 2], xs)?;
        let z = batch_norm(tape.value(z), &mut self.bn.clone(), false)?;
        let k = xs[0].rows();
        Ok(sigmoid(&z).data().chunks(k).map(|c| c.to_vec()).collect())
    }

    /// Powers for channels of mixed size.
    pub fn predict_each(&self, xs: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| Ok(self.predict(&[x])?.remove(0))).collect()
    }
}

impl Parameterized for IcModel {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.body_tensors();
        v.push(&self.bn.gamma);
        v.push(&self.bn.beta);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let IcModel { net, bn } = self;
        let mut v = IcModel::body_tensors_mut(net);
        v.push(&mut bn.gamma);
        v.push(&mut bn.beta);
        v
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut v = match &self.net {
            IcNet::Pinn { params, beta } => {
                let mut v = params.tensor_names();
                if let Some(bp) = beta {
                    v.extend(bp.tensor_names());
                }
                v
            }
            IcNet::Fc { params, .. } => params.tensor_names(),
        };
        v.push("bn.gamma".into());
        v.push("bn.beta".into());
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for IcHyper {
    fn default() -> Self {
        IcHyper { epochs: 50, batch_size: 64, lr: 0.001 }
    }
}

/// Mean over the batch of `‖f(X) − y*‖²`.
pub fn record_mse(tape: &mut Tape, out: NodeId, labels: &Tensor) -> Result<NodeId> {
    let y = tape.leaf(labels.clone());
    let d = tape.sub(out, y)?;
    let sq = tape.square(d);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / labels.rows() as f64))
}

fn batches(data: &[IcSample], size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut by_k: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in data.iter().enumerate() {
        by_k.entry(s.k).or_default().push(i);
    }
    let mut out = Vec::new();
    for (_, mut idx) in by_k {
        idx.shuffle(rng);
        // batch statistics need at least two rows
        out.extend(idx.chunks(size).filter(|c| c.len() >= 2).map(|c| c.to_vec()));
    }
    out.shuffle(rng);
    out
}

/// Supervised MSE training with RMSprop. Returns the mean training loss of
/// every epoch.
pub fn train_ic_supervised(
    model: &mut IcModel,
    data: &[IcSample],
    hyper: &IcHyper,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    if hyper.batch_size < 2 {
        return Err(Error::Config { field: "batch_size".into(), message: "must be at least 2".into() });
    }
    if model.is_pinn() && data.iter().any(|s| s.augmented) {
        log::warn!("PINN training does not use augmented samples");
        return Err(Error::contract(
            "augmented samples are only for the dense baseline; PINNs are equivariant already",
        ));
    }
    let shapes = model.shapes();
    let mut opt = RmspropState::new(hyper.lr, shapes.iter().map(|s| s.as_slice()));
    let mut trace = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let (mut total, mut count) = (0.0, 0usize);
        for idx in batches(data, hyper.batch_size, rng) {
            let xs: Vec<&Tensor> = idx.iter().map(|&i| &data[i].x).collect();
            let k = xs[0].rows();
            let labels: Vec<f64> = idx.iter().flat_map(|&i| data[i].y.iter().copied()).collect();
            let labels = Tensor::matrix(idx.len(), k, labels)?;
            let mut tape = Tape::new();
            let (ids, out, stats) = model.record_train(&mut tape, &xs)?;
            let loss = record_mse(&mut tape, out, &labels)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            total += lv * idx.len() as f64;
            count += idx.len();
            let mut grads = tape.backward(loss)?;
            let g: Vec<Tensor> = ids.iter().map(|&id| grads.take(id)).collect();
            opt.step(&mut model.tensors_mut(), &g)?;
            model.bn.update_running(&stats.mean, &stats.var);
        }
        if count == 0 {
            return Err(Error::contract("no minibatch with at least two samples of one K"));
        }
        trace.push(total / count as f64);
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcEvaluation {
    /// `mean(net sum-rate) / mean(label sum-rate)`.
    pub ratio: f64,
    pub median_ratio: f64,
    pub mean_rate: f64,
    pub mean_label_rate: f64,
    /// Mean over samples of `‖f(X) − y*‖²`.
    pub mse: f64,
}

/// Scores predicted powers against the labels of `test`.
pub fn score_ic(pred: &[Vec<f64>], test: &[IcSample], ic: &IcConfig) -> Result<IcEvaluation> {
    if test.is_empty() {
        return Err(Error::contract("test set is empty"));
    }
    let (mut net, mut lab, mut mse) = (0.0, 0.0, 0.0);
    let mut per = Vec::with_capacity(test.len());
    for (p, s) in pred.iter().zip(test) {
        let r = sum_rate(&s.x, p, ic)?;
        let l = sum_rate(&s.x, &s.y, ic)?;
        net += r;
        lab += l;
        per.push(if l > 0.0 { r / l } else { 1.0 });
        mse += p.iter().zip(&s.y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    per.sort_by(f64::total_cmp);
    let n = test.len() as f64;
    Ok(IcEvaluation {
        ratio: net / lab,
        median_ratio: per[per.len() / 2],
        mean_rate: net / n,
        mean_label_rate: lab / n,
        mse: mse / n,
    })
}

pub fn evaluate_ic(model: &IcModel, test: &[IcSample], ic: &IcConfig) -> Result<IcEvaluation> {
    if test.is_empty() {
        return Err(Error::contract("test set is empty"));
    }
    let same_k = test.iter().all(|s| s.k == test[0].k);
    let xs: Vec<&Tensor> = test.iter().map(|s| &s.x).collect();
    let mut pred = Vec::with_capacity(test.len());
    if same_k {
        for chunk in xs.chunks(256) {
            pred.extend(model.predict(chunk)?);
        }
    } else {
        pred = model.predict_each(&xs)?;
    }
    score_ic(&pred, test, ic)
}
