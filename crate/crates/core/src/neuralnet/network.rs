use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{self, Act, BnBatchStats, BnCache, ConvGeom};
use super::params::{Gradients, ModelParams, ParamKind, Tensor};
use super::{NetConfig, NetError, Result};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Running batch-norm statistics, no dropout; deterministic.
    Eval,
    /// Batch statistics and a dropout mask drawn from `mask_seed`.
    Train { mask_seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProbs {
    pub p_noaf: f64,
    pub p_withaf: f64,
    pub p_futureaf: f64,
}

impl ClassProbs {
    pub fn from_slice<T: Scalar>(p: &[T]) -> Self {
        assert_eq!(p.len(), 3, "three class probabilities");
        Self {
            p_noaf: p[0].as_f64(),
            p_withaf: p[1].as_f64(),
            p_futureaf: p[2].as_f64(),
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.p_noaf, self.p_withaf, self.p_futureaf]
    }
}

/// Batch statistics of every batch-norm layer, in network order.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T>(pub Vec<BnBatchStats<T>>);

pub struct LossGrad<T> {
    pub loss: T,
    pub grads: Gradients<T>,
    pub stats: RunningStats<T>,
    /// `batch x classes` probabilities of the training-mode pass.
    pub probs: Vec<T>,
}

#[derive(Clone, Debug)]
struct ConvIdx {
    geom: ConvGeom,
    weight: usize,
    bias: Option<usize>,
}

#[derive(Clone, Debug)]
struct BnIdx {
    scale: usize,
    shift: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug)]
struct BlockIdx {
    conv1: ConvIdx,
    bn1: BnIdx,
    conv2: ConvIdx,
    bn2: BnIdx,
    skip: Option<ConvIdx>,
}

#[derive(Clone, Debug)]
struct TensorSpec {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
    fan_in: usize,
}

/// Residual network architecture; parameters are held separately in
/// [`ModelParams`].
#[derive(Clone, Debug)]
pub struct Network {
    cfg: NetConfig,
    specs: Vec<TensorSpec>,
    stem: ConvIdx,
    stem_bn: BnIdx,
    blocks: Vec<BlockIdx>,
    dense_w: usize,
    dense_b: usize,
    features: usize,
}

struct Builder {
    specs: Vec<TensorSpec>,
}

impl Builder {
    fn push(&mut self, name: String, kind: ParamKind, shape: Vec<usize>, fan_in: usize) -> usize {
        self.specs.push(TensorSpec {
            name,
            kind,
            shape,
            fan_in,
        });
        self.specs.len() - 1
    }

    fn conv(&mut self, prefix: &str, geom: ConvGeom, bias: bool) -> ConvIdx {
        let fan_in = geom.cin * geom.kernel;
        let weight = self.push(
            format!("{prefix}.weight"),
            ParamKind::Weight,
            vec![geom.cout, geom.cin, geom.kernel],
            fan_in,
        );
        let bias = bias.then(|| {
            self.push(
                format!("{prefix}.bias"),
                ParamKind::Bias,
                vec![geom.cout],
                fan_in,
            )
        });
        ConvIdx { geom, weight, bias }
    }

    fn bn(&mut self, prefix: &str, c: usize) -> BnIdx {
        BnIdx {
            scale: self.push(format!("{prefix}.scale"), ParamKind::BnScale, vec![c], 0),
            shift: self.push(format!("{prefix}.shift"), ParamKind::BnShift, vec![c], 0),
            mean: self.push(
                format!("{prefix}.running_mean"),
                ParamKind::RunningMean,
                vec![c],
                0,
            ),
            var: self.push(
                format!("{prefix}.running_var"),
                ParamKind::RunningVar,
                vec![c],
                0,
            ),
        }
    }
}

struct BlockTape<T> {
    input: Act<T>,
    bn1: BnCache<T>,
    a1: Act<T>,
    bn2: BnCache<T>,
    out: Act<T>,
    mask: Option<Vec<T>>,
}

struct Tape<T> {
    input: Act<T>,
    stem_bn: BnCache<T>,
    stem_out: Vec<T>,
    blocks: Vec<BlockTape<T>>,
    pooled: Vec<T>,
    last: (usize, usize, usize),
}

struct Pass<T> {
    logits: Vec<T>,
    stats: RunningStats<T>,
    tape: Option<Tape<T>>,
}

/// Sequential layer counter used to name the first non-finite activation.
struct Probe {
    index: usize,
}

impl Probe {
    fn check<T: Scalar>(&mut self, name: &str, data: &[T]) -> Result<()> {
        let i = self.index;
        self.index += 1;
        if data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NetError::NonFinite {
                index: i,
                layer: name.to_string(),
            })
        }
    }
}

impl Network {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder { specs: Vec::new() };
        let k = cfg.kernel_size;
        let stem = b.conv(
            "stem.conv",
            ConvGeom::same(cfg.input_leads, cfg.stem_channels, k, cfg.stem_stride),
            false,
        );
        let stem_bn = b.bn("stem.bn", cfg.stem_channels);
        let mut cin = cfg.stem_channels;
        let mut blocks = Vec::new();
        for (i, &cout) in cfg.block_channels.iter().enumerate() {
            let s = cfg.block_downsample;
            let conv1 = b.conv(
                &format!("block{i}.conv1"),
                ConvGeom::same(cin, cout, k, 1),
                false,
            );
            let bn1 = b.bn(&format!("block{i}.bn1"), cout);
            let conv2 = b.conv(
                &format!("block{i}.conv2"),
                ConvGeom::same(cout, cout, k, s),
                false,
            );
            let bn2 = b.bn(&format!("block{i}.bn2"), cout);
            let skip = (cin != cout || s > 1).then(|| {
                b.conv(
                    &format!("block{i}.skip"),
                    ConvGeom::same(cin, cout, 1, s),
                    true,
                )
            });
            blocks.push(BlockIdx {
                conv1,
                bn1,
                conv2,
                bn2,
                skip,
            });
            cin = cout;
        }
        let features = cin;
        let dense_w = b.push(
            "head.dense.weight".into(),
            ParamKind::Weight,
            vec![cfg.n_classes, features],
            features,
        );
        let dense_b = b.push(
            "head.dense.bias".into(),
            ParamKind::Bias,
            vec![cfg.n_classes],
            features,
        );
        Ok(Self {
            cfg,
            specs: b.specs,
            stem,
            stem_bn,
            blocks,
            dense_w,
            dense_b,
            features,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn tensor_names(&self) -> Vec<&str> {
        self.specs.iter().map(|s| s.name.as_str()).collect()
    }

    /// He-normal convolution and dense weights, zero biases, unit
    /// batch-norm scale and running variance.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ModelParams<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = self
            .specs
            .iter()
            .map(|s| {
                let mut t = Tensor::filled(s.name.clone(), s.kind, s.shape.clone(), T::zero());
                match s.kind {
                    ParamKind::Weight => {
                        let sd = (2.0 / s.fan_in as f64).sqrt();
                        let dist = Normal::new(0.0, sd).expect("positive sd");
                        t.data
                            .iter_mut()
                            .for_each(|v| *v = T::lit(dist.sample(&mut rng)));
                    }
                    ParamKind::BnScale | ParamKind::RunningVar => t.data.fill(T::one()),
                    _ => {}
                }
                t
            })
            .collect();
        ModelParams::new(tensors)
    }

    /// Verifies tensor names and shapes against the architecture.
    pub fn check_params<T: Scalar>(&self, params: &ModelParams<T>) -> Result<()> {
        if params.tensors.len() != self.specs.len() {
            return Err(NetError::Shape {
                layer: "params".into(),
                detail: format!(
                    "expected {} tensors, got {}",
                    self.specs.len(),
                    params.tensors.len()
                ),
            });
        }
        for (s, t) in self.specs.iter().zip(&params.tensors) {
            let n: usize = s.shape.iter().product();
            if s.name != t.name || s.shape != t.shape || t.data.len() != n || s.kind != t.kind {
                return Err(NetError::Shape {
                    layer: s.name.clone(),
                    detail: format!(
                        "expected {:?} {:?}, got {} {:?}",
                        s.kind, s.shape, t.name, t.shape
                    ),
                });
            }
        }
        Ok(())
    }

    fn gather<T: Scalar>(&self, inputs: &[&[T]]) -> Result<Act<T>> {
        if inputs.is_empty() {
            return Err(NetError::EmptySet("input batch"));
        }
        let want = self.cfg.input_size();
        if let Some(bad) = inputs.iter().find(|x| x.len() != want) {
            return Err(NetError::Shape {
                layer: "input".into(),
                detail: format!(
                    "expected {} x {} = {want} samples, got {}",
                    self.cfg.input_leads,
                    self.cfg.input_len,
                    bad.len()
                ),
            });
        }
        Ok(Act::from_samples(
            inputs,
            self.cfg.input_leads,
            self.cfg.input_len,
        ))
    }

    fn run<T: Scalar>(
        &self,
        p: &ModelParams<T>,
        inputs: &[&[T]],
        mode: Mode,
        record: bool,
    ) -> Result<Pass<T>> {
        self.check_params(p)?;
        let x = self.gather(inputs)?;
        let w = |i: usize| p.tensors[i].data.as_slice();
        let train = matches!(mode, Mode::Train { .. });
        let mut rng = match mode {
            Mode::Train { mask_seed } => Some(ChaCha8Rng::seed_from_u64(mask_seed)),
            Mode::Eval => None,
        };
        let mut probe = Probe { index: 0 };
        let mut stats = Vec::new();

        let bn =
            |a: &mut Act<T>, idx: &BnIdx, stats: &mut Vec<BnBatchStats<T>>| -> Option<BnCache<T>> {
                if train {
                    let (cache, st) = layers::bn_train_forward(a, w(idx.scale), w(idx.shift));
                    stats.push(st);
                    Some(cache)
                } else {
                    layers::bn_eval_forward(a, w(idx.scale), w(idx.shift), w(idx.mean), w(idx.var));
                    None
                }
            };

        let mut h = layers::conv_forward(&self.stem.geom, w(self.stem.weight), None, &x);
        let input = if record { Some(x) } else { None };
        probe.check("stem.conv", &h.data)?;
        let stem_bn = bn(&mut h, &self.stem_bn, &mut stats);
        probe.check("stem.bn", &h.data)?;
        layers::relu_forward(&mut h.data);
        let stem_out = if record { h.data.clone() } else { Vec::new() };

        let mut block_tapes = Vec::new();
        for (i, blk) in self.blocks.iter().enumerate() {
            let mut a = layers::conv_forward(&blk.conv1.geom, w(blk.conv1.weight), None, &h);
            probe.check(&format!("block{i}.conv1"), &a.data)?;
            let bn1 = bn(&mut a, &blk.bn1, &mut stats);
            probe.check(&format!("block{i}.bn1"), &a.data)?;
            layers::relu_forward(&mut a.data);
            let mut z = layers::conv_forward(&blk.conv2.geom, w(blk.conv2.weight), None, &a);
            probe.check(&format!("block{i}.conv2"), &z.data)?;
            let bn2 = bn(&mut z, &blk.bn2, &mut stats);
            probe.check(&format!("block{i}.bn2"), &z.data)?;
            match &blk.skip {
                Some(sk) => {
                    let s = layers::conv_forward(&sk.geom, w(sk.weight), sk.bias.map(w), &h);
                    probe.check(&format!("block{i}.skip"), &s.data)?;
                    z.data.iter_mut().zip(&s.data).for_each(|(v, &u)| *v += u);
                }
                None => z.data.iter_mut().zip(&h.data).for_each(|(v, &u)| *v += u),
            }
            layers::relu_forward(&mut z.data);
            let out = if record {
                z.clone()
            } else {
                Act {
                    channels: 0,
                    batch: 0,
                    len: 0,
                    data: Vec::new(),
                }
            };
            let mask = match rng.as_mut() {
                Some(r) if self.cfg.dropout > 0.0 => {
                    let m = layers::dropout_mask(r, z.data.len(), self.cfg.dropout);
                    layers::apply_mask(&mut z.data, &m);
                    Some(m)
                }
                _ => None,
            };
            if record {
                let input = std::mem::replace(&mut h, z);
                block_tapes.push(BlockTape {
                    input,
                    bn1: bn1.expect("train mode"),
                    a1: a,
                    bn2: bn2.expect("train mode"),
                    out,
                    mask,
                });
            } else {
                h = z;
            }
        }

        let pooled = layers::gap_forward(&h);
        let logits = layers::dense_forward(
            w(self.dense_w),
            w(self.dense_b),
            &pooled,
            self.features,
            h.batch,
        );
        probe.check("head.dense", &logits)?;
        let last = (h.channels, h.batch, h.len);
        let tape = record.then(|| Tape {
            input: input.expect("recorded"),
            stem_bn: stem_bn.expect("train mode"),
            stem_out,
            blocks: block_tapes,
            pooled,
            last,
        });
        Ok(Pass {
            logits,
            stats: RunningStats(stats),
            tape,
        })
    }

    /// Flat `batch x classes` softmax probabilities.
    pub fn forward_probs<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        inputs: &[&[T]],
        mode: Mode,
    ) -> Result<Vec<T>> {
        let pass = self.run(params, inputs, mode, false)?;
        Ok(layers::softmax(
            &pass.logits,
            self.cfg.n_classes,
            inputs.len(),
        ))
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        inputs: &[&[T]],
        mode: Mode,
    ) -> Result<Vec<ClassProbs>> {
        if self.cfg.n_classes != 3 {
            return Err(NetError::Config(format!(
                "ClassProbs needs 3 classes, network has {}",
                self.cfg.n_classes
            )));
        }
        let p = self.forward_probs(params, inputs, mode)?;
        Ok(p.chunks_exact(3).map(ClassProbs::from_slice).collect())
    }

    fn check_labels(&self, inputs: usize, labels: &[usize]) -> Result<()> {
        if labels.len() != inputs {
            return Err(NetError::Shape {
                layer: "labels".into(),
                detail: format!("{} labels for {inputs} inputs", labels.len()),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= self.cfg.n_classes) {
            return Err(NetError::Label {
                label: l,
                n_classes: self.cfg.n_classes,
            });
        }
        Ok(())
    }

    /// Mean cross-entropy without gradients.
    pub fn loss<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        inputs: &[&[T]],
        labels: &[usize],
        mode: Mode,
    ) -> Result<T> {
        self.check_labels(inputs.len(), labels)?;
        let pass = self.run(params, inputs, mode, false)?;
        Ok(layers::cross_entropy(&pass.logits, labels, self.cfg.n_classes).0)
    }

    /// Training-mode loss with exact gradients for every trainable tensor.
    pub fn loss_and_grad<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        inputs: &[&[T]],
        labels: &[usize],
        mask_seed: u64,
    ) -> Result<LossGrad<T>> {
        self.check_labels(inputs.len(), labels)?;
        let pass = self.run(params, inputs, Mode::Train { mask_seed }, true)?;
        let tape = pass.tape.expect("recorded");
        let (loss, dlogits, probs) =
            layers::cross_entropy(&pass.logits, labels, self.cfg.n_classes);
        let mut g = params.zero_grads();
        let w = |i: usize| params.tensors[i].data.as_slice();
        let (c, b, l) = tape.last;

        let (dw, db) = two_mut(&mut g.0, self.dense_w, self.dense_b);
        let dpooled = layers::dense_backward(
            w(self.dense_w),
            &tape.pooled,
            &dlogits,
            self.features,
            b,
            dw,
            db,
        );
        let mut d = layers::gap_backward(&dpooled, c, b, l);

        for (blk, bt) in self.blocks.iter().zip(tape.blocks).rev() {
            if let Some(m) = &bt.mask {
                layers::apply_mask(&mut d.data, m);
            }
            layers::relu_backward(&mut d.data, &bt.out.data);
            let d_skip = d.clone();
            bn_back(&mut g, &mut d, &bt.bn2, &blk.bn2, w(blk.bn2.scale));
            let mut da = layers::conv_backward(
                &blk.conv2.geom,
                w(blk.conv2.weight),
                &bt.a1,
                &d,
                &mut g.0[blk.conv2.weight],
                None,
                true,
            )
            .expect("dx requested");
            layers::relu_backward(&mut da.data, &bt.a1.data);
            bn_back(&mut g, &mut da, &bt.bn1, &blk.bn1, w(blk.bn1.scale));
            let mut dx = layers::conv_backward(
                &blk.conv1.geom,
                w(blk.conv1.weight),
                &bt.input,
                &da,
                &mut g.0[blk.conv1.weight],
                None,
                true,
            )
            .expect("dx requested");
            match &blk.skip {
                Some(sk) => {
                    let bias = sk.bias.expect("skip bias");
                    let (gw, gb) = two_mut(&mut g.0, sk.weight, bias);
                    let ds = layers::conv_backward(
                        &sk.geom,
                        w(sk.weight),
                        &bt.input,
                        &d_skip,
                        gw,
                        Some(gb),
                        true,
                    )
                    .expect("dx requested");
                    dx.data.iter_mut().zip(&ds.data).for_each(|(a, &s)| *a += s);
                }
                None => dx
                    .data
                    .iter_mut()
                    .zip(&d_skip.data)
                    .for_each(|(a, &s)| *a += s),
            }
            d = dx;
        }

        layers::relu_backward(&mut d.data, &tape.stem_out);
        bn_back(
            &mut g,
            &mut d,
            &tape.stem_bn,
            &self.stem_bn,
            w(self.stem_bn.scale),
        );
        layers::conv_backward(
            &self.stem.geom,
            w(self.stem.weight),
            &tape.input,
            &d,
            &mut g.0[self.stem.weight],
            None,
            false,
        );

        for (t, gr) in params.tensors.iter().zip(&g.0) {
            if gr.iter().any(|v| !v.is_finite()) {
                return Err(NetError::NonFiniteGradient(t.name.clone()));
            }
        }
        Ok(LossGrad {
            loss,
            grads: g,
            stats: pass.stats,
            probs,
        })
    }

    /// Folds the batch statistics of a training step into the running
    /// batch-norm estimates.
    pub fn apply_running_stats<T: Scalar>(
        &self,
        params: &mut ModelParams<T>,
        stats: &RunningStats<T>,
    ) {
        let bns =
            std::iter::once(&self.stem_bn).chain(self.blocks.iter().flat_map(|b| [&b.bn1, &b.bn2]));
        for (idx, st) in bns.zip(&stats.0) {
            let (m, v) = two_mut_tensors(&mut params.tensors, idx.mean, idx.var);
            layers::bn_update_running(m, v, st);
        }
    }
}

fn bn_back<T: Scalar>(
    g: &mut Gradients<T>,
    d: &mut Act<T>,
    cache: &BnCache<T>,
    idx: &BnIdx,
    scale: &[T],
) {
    let (gs, gh) = two_mut(&mut g.0, idx.scale, idx.shift);
    layers::bn_backward(d, cache, scale, gs, gh);
}

fn two_mut<T>(v: &mut [Vec<T>], i: usize, j: usize) -> (&mut [T], &mut [T]) {
    assert!(i < j);
    let (a, b) = v.split_at_mut(j);
    (&mut a[i], &mut b[0])
}

fn two_mut_tensors<T>(v: &mut [Tensor<T>], i: usize, j: usize) -> (&mut [T], &mut [T]) {
    assert!(i < j);
    let (a, b) = v.split_at_mut(j);
    (&mut a[i].data, &mut b[0].data)
}
