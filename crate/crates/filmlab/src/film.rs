//! Feature-wise linear modulation and the modulated residual block.
//!
//! The core transformation scales and shifts each feature map by
//! per-(example, channel) coefficients produced from the question encoding:
//! `out[n,c,h,w] = gamma[n,c] * x[n,c,h,w] + beta[n,c]`. Everything spatial
//! is untouched, which is what keeps the conditioning cost independent of
//! image resolution.
//!
//! Gamma is parameterized: the default head emits a delta around one, so a
//! zero-initialized generator starts as the identity and training can only
//! move away from it. The restricted modes (sigmoid, tanh, exp, fixed one)
//! and the alternative placements inside the residual block exist for the
//! ablation grid.

use crate::error::Error;
use crate::graph::{Graph, NodeId};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaMode {
    DeltaPlusOne,
    Raw,
    Sigmoid,
    Tanh,
    Exp,
    FixedOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaMode {
    Raw,
    FixedZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilmPlacement {
    /// After the second conv's normalization, before its ReLU.
    Standard,
    AfterResidual,
    AfterRelu2,
    AfterConv2,
    BeforeConv1,
    None,
}

impl GammaMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GammaMode::DeltaPlusOne => "DELTA_PLUS_ONE",
            GammaMode::Raw => "RAW",
            GammaMode::Sigmoid => "SIGMOID",
            GammaMode::Tanh => "TANH",
            GammaMode::Exp => "EXP",
            GammaMode::FixedOne => "FIXED_ONE",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "DELTA_PLUS_ONE" => GammaMode::DeltaPlusOne,
            "RAW" => GammaMode::Raw,
            "SIGMOID" => GammaMode::Sigmoid,
            "TANH" => GammaMode::Tanh,
            "EXP" => GammaMode::Exp,
            "FIXED_ONE" => GammaMode::FixedOne,
            _ => return Err(Error::config(format!("unknown gamma mode {s:?}"))),
        })
    }

    /// Whether the generator head carries columns for gamma at all.
    pub fn has_head(&self) -> bool {
        !matches!(self, GammaMode::FixedOne)
    }
}

impl BetaMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            BetaMode::Raw => "RAW",
            BetaMode::FixedZero => "FIXED_ZERO",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "RAW" => BetaMode::Raw,
            "FIXED_ZERO" => BetaMode::FixedZero,
            _ => return Err(Error::config(format!("unknown beta mode {s:?}"))),
        })
    }

    pub fn has_head(&self) -> bool {
        !matches!(self, BetaMode::FixedZero)
    }
}

impl FilmPlacement {
    pub fn as_str(&self) -> &'static str {
        match self {
            FilmPlacement::Standard => "STANDARD",
            FilmPlacement::AfterResidual => "AFTER_RESIDUAL",
            FilmPlacement::AfterRelu2 => "AFTER_RELU2",
            FilmPlacement::AfterConv2 => "AFTER_CONV2",
            FilmPlacement::BeforeConv1 => "BEFORE_CONV1",
            FilmPlacement::None => "NONE",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "STANDARD" => FilmPlacement::Standard,
            "AFTER_RESIDUAL" => FilmPlacement::AfterResidual,
            "AFTER_RELU2" => FilmPlacement::AfterRelu2,
            "AFTER_CONV2" => FilmPlacement::AfterConv2,
            "BEFORE_CONV1" => FilmPlacement::BeforeConv1,
            "NONE" => FilmPlacement::None,
            _ => return Err(Error::config(format!("unknown placement {s:?}"))),
        })
    }

    pub const ALL: [FilmPlacement; 6] = [
        FilmPlacement::Standard,
        FilmPlacement::AfterResidual,
        FilmPlacement::AfterRelu2,
        FilmPlacement::AfterConv2,
        FilmPlacement::BeforeConv1,
        FilmPlacement::None,
    ];
}

/// Per-block modulation coefficients, batch-extended to \[N, C\].
#[derive(Debug, Clone, PartialEq)]
pub struct FilmParams<S> {
    pub per_block: Vec<(Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> FilmParams<S> {
    pub fn identity(n: usize, widths: &[usize]) -> Self {
        FilmParams {
            per_block: widths
                .iter()
                .map(|&c| {
                    (
                        Tensor::filled(&[n, c], S::one()),
                        Tensor::zeros(&[n, c]),
                    )
                })
                .collect(),
        }
    }

    pub fn blocks(&self) -> usize {
        self.per_block.len()
    }

    pub fn all_finite(&self) -> bool {
        self.per_block
            .iter()
            .all(|(g, b)| g.all_finite() && b.all_finite())
    }
}

/// Pure-tensor modulation, used by tests and analysis tooling. The graph
/// op `Graph::film` is the differentiable twin.
pub fn film_apply<S: Scalar>(
    f: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
) -> Result<Tensor<S>> {
    let s = f.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("film_apply: rank {} input", s.len())));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    if gamma.shape() != [n, c] || beta.shape() != [n, c] {
        return Err(Error::shape(format!(
            "film_apply: gamma {:?}, beta {:?} for input {s:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let data = ops::film_forward(f.data(), gamma.data(), beta.data(), n, c, hw);
    Tensor::from_vec(s, data)
}

/// Apply a gamma parameterization to raw head output (pure-tensor form).
pub fn gamma_transform<S: Scalar>(raw: &Tensor<S>, mode: GammaMode) -> Tensor<S> {
    match mode {
        GammaMode::DeltaPlusOne => raw.map(|v| S::one() + v),
        GammaMode::Raw => raw.clone(),
        GammaMode::Sigmoid => raw.map(|v| S::one() / (S::one() + (-v).exp())),
        GammaMode::Tanh => raw.map(|v| v.tanh()),
        GammaMode::Exp => raw.map(|v| v.exp()),
        GammaMode::FixedOne => Tensor::filled(raw.shape(), S::one()),
    }
}

/// Graph twin of [`gamma_transform`]. `FixedOne` detaches from the head
/// entirely and contributes a constant.
pub fn gamma_transform_node<S: Scalar>(
    g: &mut Graph<S>,
    raw: NodeId,
    mode: GammaMode,
) -> NodeId {
    match mode {
        GammaMode::DeltaPlusOne => g.affine_const(raw, S::one(), S::one()),
        GammaMode::Raw => raw,
        GammaMode::Sigmoid => g.sigmoid(raw),
        GammaMode::Tanh => g.tanh(raw),
        GammaMode::Exp => g.exp(raw),
        GammaMode::FixedOne => {
            let shape = g.value(raw).shape().to_vec();
            g.constant(Tensor::filled(&shape, S::one()))
        }
    }
}

/// Coordinate feature maps: channel 0 varies along x (width), channel 1
/// along y (height), each linearly spaced from -1 to +1. A single
/// row/column degenerates to 0.
pub fn coord_maps<S: Scalar>(h: usize, w: usize) -> Tensor<S> {
    let axis = |n: usize, i: usize| -> f64 {
        if n <= 1 {
            0.0
        } else {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        }
    };
    let mut data = vec![S::zero(); 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = S::from_f64(axis(w, x));
            data[h * w + y * w + x] = S::from_f64(axis(h, y));
        }
    }
    Tensor::from_vec(&[2, h, w], data).unwrap()
}

/// Coordinate maps tiled across a batch: \[N, 2, H, W\].
pub fn coord_maps_batch<S: Scalar>(n: usize, h: usize, w: usize) -> Tensor<S> {
    let single = coord_maps::<S>(h, w);
    let mut data = Vec::with_capacity(n * 2 * h * w);
    for _ in 0..n {
        data.extend_from_slice(single.data());
    }
    Tensor::from_vec(&[n, 2, h, w], data).unwrap()
}

/// One generator head: a shared affine map whose output splits into the
/// gamma and beta halves. Either half may be absent under the fixed modes.
pub struct HeadNodes {
    /// (weight \[E, width\], bias \[width\]) — absent when width is 0.
    pub linear: Option<(NodeId, NodeId)>,
    pub feature_maps: usize,
}

/// Width of a head's output for the given modes and channel count.
pub fn head_width(c: usize, gamma_mode: GammaMode, beta_mode: BetaMode) -> usize {
    let g = if gamma_mode.has_head() { c } else { 0 };
    let b = if beta_mode.has_head() { c } else { 0 };
    g + b
}

/// Project a batch of question embeddings through the per-block heads into
/// transformed (gamma, beta) nodes.
pub fn film_generator_project<S: Scalar>(
    g: &mut Graph<S>,
    question: NodeId,
    heads: &[HeadNodes],
    gamma_mode: GammaMode,
    beta_mode: BetaMode,
) -> Result<Vec<(NodeId, NodeId)>> {
    let n = g.value(question).shape()[0];
    let mut out = Vec::with_capacity(heads.len());
    for head in heads {
        let c = head.feature_maps;
        let gcols = if gamma_mode.has_head() { c } else { 0 };
        let bcols = if beta_mode.has_head() { c } else { 0 };
        let (raw_gamma, raw_beta) = match head.linear {
            Some((w, b)) => {
                let expect = gcols + bcols;
                let got = g.value(w).shape()[1];
                if got != expect {
                    return Err(Error::shape(format!(
                        "film head width {got}, expected {expect}"
                    )));
                }
                let y = g.linear(question, w, Some(b))?;
                let rg = if gcols > 0 {
                    Some(g.slice_cols(y, 0, gcols)?)
                } else {
                    None
                };
                let rb = if bcols > 0 {
                    Some(g.slice_cols(y, gcols, bcols)?)
                } else {
                    None
                };
                (rg, rb)
            }
            None => (None, None),
        };
        let gamma = match raw_gamma {
            Some(raw) => gamma_transform_node(g, raw, gamma_mode),
            None => g.constant(Tensor::filled(&[n, c], S::one())),
        };
        let beta = match raw_beta {
            Some(raw) => raw,
            None => g.constant(Tensor::zeros(&[n, c])),
        };
        out.push((gamma, beta));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResBlockConfig {
    pub feature_maps: usize,
    pub kernel_size: usize,
    pub use_residual: bool,
    pub use_batch_norm: bool,
    pub placement: FilmPlacement,
    pub use_coord_maps: bool,
}

/// Graph node ids of one block's convolution parameters.
#[derive(Debug, Clone, Copy)]
pub struct ResBlockConvs {
    pub conv1_w: NodeId,
    pub conv1_b: NodeId,
    pub conv2_w: NodeId,
    /// Present only when batch norm is off (otherwise redundant).
    pub conv2_b: Option<NodeId>,
}

/// Inputs to one modulated block. `x` carries the block's feature channels
/// only; coordinate channels are appended inside, so they never reach the
/// skip path and BEFORE_CONV1 modulates just the feature channels.
#[derive(Debug, Clone, Copy)]
pub struct ResBlockIo {
    pub x: NodeId,
    pub coords: Option<NodeId>,
    pub gamma: NodeId,
    pub beta: NodeId,
}

/// The normalization hook: the model supplies batch-norm wired to the
/// right statistics and mode. `affine` says whether this site's learned
/// scale/shift apply (they are disabled when the normalization output
/// feeds FiLM directly).
pub type BnHook<'a, S> = dyn FnMut(&mut Graph<S>, NodeId, bool) -> Result<NodeId> + 'a;

/// One FiLM-ed residual block.
///
/// Standard placement: 1x1 conv, ReLU, kernel-size conv, batch norm with
/// affine disabled, FiLM, ReLU, then the residual add from the post-first-
/// ReLU tensor. Other placements move only the FiLM call; NONE skips it.
pub fn resblock_forward<S: Scalar>(
    g: &mut Graph<S>,
    io: ResBlockIo,
    convs: &ResBlockConvs,
    cfg: &ResBlockConfig,
    bn: &mut BnHook<'_, S>,
) -> Result<NodeId> {
    let place = cfg.placement;
    let film_at = |g: &mut Graph<S>, t: NodeId| g.film(t, io.gamma, io.beta);

    let mut cur = io.x;
    if place == FilmPlacement::BeforeConv1 {
        cur = film_at(g, cur)?;
    }
    if cfg.use_coord_maps {
        let coords = io
            .coords
            .ok_or_else(|| Error::shape("resblock: coord maps enabled but none supplied".into()))?;
        cur = g.concat_channels(cur, coords)?;
    }
    let c1 = g.conv2d(cur, convs.conv1_w, Some(convs.conv1_b), 1, 0)?;
    let r1 = g.relu(c1);

    let pad = (cfg.kernel_size - 1) / 2;
    let mut t = g.conv2d(r1, convs.conv2_w, convs.conv2_b, 1, pad)?;
    if place == FilmPlacement::AfterConv2 {
        t = film_at(g, t)?;
    }
    if cfg.use_batch_norm {
        let affine = place != FilmPlacement::Standard;
        t = bn(g, t, affine)?;
    }
    if place == FilmPlacement::Standard {
        t = film_at(g, t)?;
    }
    t = g.relu(t);
    if place == FilmPlacement::AfterRelu2 {
        t = film_at(g, t)?;
    }
    if cfg.use_residual {
        t = g.add(t, r1)?;
    }
    if place == FilmPlacement::AfterResidual {
        t = film_at(g, t)?;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_loss_grads;
    use crate::rng::RngState;

    fn rand_t(rng: &mut RngState, shape: &[usize]) -> Tensor<f64> {
        let len: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap()
    }

    #[test]
    fn identity_modulation_is_bit_exact() {
        let mut rng = RngState::new(1);
        let f = rand_t(&mut rng, &[2, 3, 4, 5]);
        let gamma = Tensor::filled(&[2, 3], 1.0);
        let beta = Tensor::zeros(&[2, 3]);
        let out = film_apply(&f, &gamma, &beta).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn hand_case_scales_and_shifts() {
        let f = Tensor::<f64>::filled(&[1, 1, 2, 2], 2.0);
        let out = film_apply(&f, &Tensor::filled(&[1, 1], 3.0), &Tensor::filled(&[1, 1], 1.0))
            .unwrap();
        assert!(out.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn zero_gamma_shuts_a_map_off() {
        let mut rng = RngState::new(2);
        let f = rand_t(&mut rng, &[1, 2, 3, 3]);
        let gamma = Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap();
        let beta = Tensor::from_vec(&[1, 2], vec![0.25, 0.0]).unwrap();
        let out = film_apply(&f, &gamma, &beta).unwrap();
        assert!(out.data()[..9].iter().all(|&v| v == 0.25));
        assert_eq!(&out.data()[9..], &f.data()[9..]);
    }

    #[test]
    fn affine_law_holds() {
        let mut rng = RngState::new(3);
        let f1 = rand_t(&mut rng, &[2, 2, 3, 3]);
        let f2 = rand_t(&mut rng, &[2, 2, 3, 3]);
        let gamma = rand_t(&mut rng, &[2, 2]);
        let beta = rand_t(&mut rng, &[2, 2]);
        let sum = f1.zip_map(&f2, |a, b| a + b).unwrap();
        let lhs = film_apply(&sum, &gamma, &beta).unwrap();
        let a = film_apply(&f1, &gamma, &beta).unwrap();
        let b = film_apply(&f2, &gamma, &beta).unwrap();
        for (i, &l) in lhs.data().iter().enumerate() {
            let c = i / 9; // channel-major within example
            let bcast = beta.data()[c];
            let rhs = a.data()[i] + b.data()[i] - bcast;
            assert!((l - rhs).abs() < 1e-5, "at {i}: {l} vs {rhs}");
        }
    }

    #[test]
    fn spatial_permutation_commutes() {
        let mut rng = RngState::new(4);
        let f = rand_t(&mut rng, &[1, 2, 2, 3]);
        let gamma = rand_t(&mut rng, &[1, 2]);
        let beta = rand_t(&mut rng, &[1, 2]);
        let mut perm: Vec<usize> = (0..6).collect();
        rng.shuffle(&mut perm);
        let permute = |t: &Tensor<f64>| {
            let mut data = vec![0.0; 12];
            for c in 0..2 {
                for (dst, &src) in perm.iter().enumerate() {
                    data[c * 6 + dst] = t.data()[c * 6 + src];
                }
            }
            Tensor::from_vec(&[1, 2, 2, 3], data).unwrap()
        };
        let lhs = film_apply(&permute(&f), &gamma, &beta).unwrap();
        let rhs = permute(&film_apply(&f, &gamma, &beta).unwrap());
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn gamma_modes_transform_as_specified() {
        let zeros = Tensor::<f64>::zeros(&[1, 3]);
        assert!(gamma_transform(&zeros, GammaMode::DeltaPlusOne)
            .data()
            .iter()
            .all(|&v| v == 1.0));
        assert!(gamma_transform(&zeros, GammaMode::Exp)
            .data()
            .iter()
            .all(|&v| v == 1.0));
        let mut rng = RngState::new(5);
        let raw = rand_t(&mut rng, &[2, 4]);
        let sig = gamma_transform(&raw, GammaMode::Sigmoid);
        assert!(sig.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let tanh = gamma_transform(&raw, GammaMode::Tanh);
        assert!(tanh.data().iter().all(|&v| v.abs() < 1.0));
        let fixed = gamma_transform(&raw, GammaMode::FixedOne);
        assert!(fixed.data().iter().all(|&v| v == 1.0));
        assert_eq!(gamma_transform(&raw, GammaMode::Raw), raw);
    }

    #[test]
    fn coord_maps_match_contract() {
        let m = coord_maps::<f64>(3, 3);
        // x channel, first row
        assert_eq!(&m.data()[0..3], &[-1.0, 0.0, 1.0]);
        // corners of both channels are exactly +-1
        assert_eq!(m.at(&[0, 0, 0]), -1.0);
        assert_eq!(m.at(&[0, 2, 2]), 1.0);
        assert_eq!(m.at(&[1, 0, 0]), -1.0);
        assert_eq!(m.at(&[1, 2, 2]), 1.0);
        let flat = coord_maps::<f64>(1, 4);
        for x in 0..4 {
            assert_eq!(flat.at(&[1, 0, x]), 0.0, "single row: y must be 0");
        }
        let thin = coord_maps::<f64>(4, 1);
        for y in 0..4 {
            assert_eq!(thin.at(&[0, y, 0]), 0.0, "single column: x must be 0");
        }
    }

    #[test]
    fn zero_head_projects_to_identity() {
        let mut g: Graph<f64> = Graph::new();
        let q = g.constant(Tensor::from_vec(&[2, 3], vec![0.5, -1.0, 2.0, 0.0, 1.0, -2.0]).unwrap());
        let w = g.leaf(Tensor::zeros(&[3, 8]));
        let b = g.leaf(Tensor::zeros(&[8]));
        let heads = [HeadNodes {
            linear: Some((w, b)),
            feature_maps: 4,
        }];
        let out = film_generator_project(&mut g, q, &heads, GammaMode::DeltaPlusOne, BetaMode::Raw)
            .unwrap();
        assert_eq!(out.len(), 1);
        let (gamma, beta) = out[0];
        assert!(g.value(gamma).data().iter().all(|&v| v == 1.0));
        assert!(g.value(beta).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distinct_embeddings_give_distinct_params() {
        let mut rng = RngState::new(6);
        let mut g: Graph<f64> = Graph::new();
        let q = g.constant(rand_t(&mut rng, &[2, 3]));
        let w = g.leaf(rand_t(&mut rng, &[3, 4]));
        let b = g.leaf(rand_t(&mut rng, &[4]));
        let heads = [HeadNodes {
            linear: Some((w, b)),
            feature_maps: 2,
        }];
        let out =
            film_generator_project(&mut g, q, &heads, GammaMode::DeltaPlusOne, BetaMode::Raw)
                .unwrap();
        let (gamma, _) = out[0];
        let gv = g.value(gamma);
        assert_ne!(&gv.data()[..2], &gv.data()[2..]);
    }

    #[test]
    fn fixed_modes_drop_their_head_columns() {
        assert_eq!(head_width(32, GammaMode::DeltaPlusOne, BetaMode::Raw), 64);
        assert_eq!(head_width(32, GammaMode::FixedOne, BetaMode::Raw), 32);
        assert_eq!(head_width(32, GammaMode::DeltaPlusOne, BetaMode::FixedZero), 32);
        assert_eq!(head_width(32, GammaMode::FixedOne, BetaMode::FixedZero), 0);
    }

    #[test]
    fn generator_head_gradients_check_out() {
        // loss = sum(film(x, project(q))) wrt head weight and bias.
        let mut rng = RngState::new(7);
        let q_val = rand_t(&mut rng, &[2, 3]);
        let x_val = rand_t(&mut rng, &[2, 2, 3, 3]);
        let inputs = vec![rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[4])];
        let err = check_loss_grads(
            &|g, ids| {
                let q = g.constant(q_val.clone());
                let x = g.constant(x_val.clone());
                let heads = [HeadNodes {
                    linear: Some((ids[0], ids[1])),
                    feature_maps: 2,
                }];
                let pb =
                    film_generator_project(g, q, &heads, GammaMode::DeltaPlusOne, BetaMode::Raw)?;
                let (gamma, beta) = pb[0];
                let y = g.film(x, gamma, beta)?;
                Ok(g.sum_all(y))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    fn block_weights(
        g: &mut Graph<f64>,
        rng: &mut RngState,
        c: usize,
        cin1: usize,
        k: usize,
    ) -> ResBlockConvs {
        let conv1_w = g.leaf(rand_t(rng, &[c, cin1, 1, 1]));
        let conv1_b = g.leaf(rand_t(rng, &[c]));
        let conv2_w = g.leaf(rand_t(rng, &[c, c, k, k]));
        ResBlockConvs {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b: None,
        }
    }

    #[test]
    fn placements_agree_under_identity_modulation() {
        let mut rng = RngState::new(8);
        let c = 3;
        let x_val = rand_t(&mut rng, &[2, c, 4, 4]);
        let coords_val = coord_maps_batch::<f64>(2, 4, 4);
        let w1 = rand_t(&mut rng, &[c, c + 2, 1, 1]);
        let b1 = rand_t(&mut rng, &[c]);
        let w2 = rand_t(&mut rng, &[c, c, 3, 3]);
        let mut outputs: Vec<Tensor<f64>> = Vec::new();
        for place in FilmPlacement::ALL {
            let mut g: Graph<f64> = Graph::new();
            let x = g.constant(x_val.clone());
            let coords = g.constant(coords_val.clone());
            let gamma = g.constant(Tensor::filled(&[2, c], 1.0));
            let beta = g.constant(Tensor::zeros(&[2, c]));
            let convs = ResBlockConvs {
                conv1_w: g.leaf(w1.clone()),
                conv1_b: g.leaf(b1.clone()),
                conv2_w: g.leaf(w2.clone()),
                conv2_b: None,
            };
            let cfg = ResBlockConfig {
                feature_maps: c,
                kernel_size: 3,
                use_residual: true,
                use_batch_norm: true,
                placement: place,
                use_coord_maps: true,
            };
            let mut rm = vec![0.0f64; c];
            let mut rv = vec![1.0f64; c];
            let bn_w = g.leaf(Tensor::filled(&[c], 1.0));
            let bn_b = g.leaf(Tensor::zeros(&[c]));
            let out = resblock_forward(
                &mut g,
                ResBlockIo {
                    x,
                    coords: Some(coords),
                    gamma,
                    beta,
                },
                &convs,
                &cfg,
                &mut |g, t, affine| {
                    let (w, b) = if affine { (Some(bn_w), Some(bn_b)) } else { (None, None) };
                    g.bn2d_train(t, w, b, &mut rm, &mut rv, 0.1, 1e-5)
                },
            )
            .unwrap();
            outputs.push(g.value(out).clone());
        }
        for o in &outputs[1..] {
            assert_eq!(o, &outputs[0], "placement variants must agree at identity");
        }
    }

    #[test]
    fn zero_convs_pass_residual_through() {
        let mut g: Graph<f64> = Graph::new();
        let mut rng = RngState::new(9);
        let c = 2;
        let x = g.constant(rand_t(&mut rng, &[1, c, 3, 3]));
        let gamma = g.constant(Tensor::filled(&[1, c], 1.0));
        let beta = g.constant(Tensor::zeros(&[1, c]));
        let conv1_w = g.leaf(Tensor::zeros(&[c, c, 1, 1]));
        let conv1_b = g.leaf(Tensor::from_vec(&[c], vec![0.5, -0.25]).unwrap());
        let conv2_w = g.leaf(Tensor::zeros(&[c, c, 3, 3]));
        let convs = ResBlockConvs {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b: None,
        };
        let cfg = ResBlockConfig {
            feature_maps: c,
            kernel_size: 3,
            use_residual: true,
            use_batch_norm: true,
            placement: FilmPlacement::Standard,
            use_coord_maps: false,
        };
        let mut rm = vec![0.0f64; c];
        let mut rv = vec![1.0f64; c];
        let out = resblock_forward(
            &mut g,
            ResBlockIo {
                x,
                coords: None,
                gamma,
                beta,
            },
            &convs,
            &cfg,
            &mut |g, t, affine| {
                assert!(!affine);
                g.bn2d_train(t, None, None, &mut rm, &mut rv, 0.1, 1e-5)
            },
        )
        .unwrap();
        // conv1 output is its bias everywhere: relu gives [0.5, 0] planes;
        // the trunk is all zeros after the zero conv2 and normalization of
        // a constant-zero tensor, so the block output is the skip branch.
        let v = g.value(out);
        assert!(v.data()[..9].iter().all(|&x| x == 0.5));
        assert!(v.data()[9..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn full_block_gradient_checks_out() {
        let mut rng = RngState::new(10);
        let c = 2;
        let x_val = rand_t(&mut rng, &[2, c, 3, 3]);
        let coords_val = coord_maps_batch::<f64>(2, 3, 3);
        let inputs = vec![
            rand_t(&mut rng, &[c, c + 2, 1, 1]), // conv1 w
            rand_t(&mut rng, &[c]),              // conv1 b
            rand_t(&mut rng, &[c, c, 3, 3]),     // conv2 w
            rand_t(&mut rng, &[2, c]),           // gamma
            rand_t(&mut rng, &[2, c]),           // beta
        ];
        let err = check_loss_grads(
            &|g, ids| {
                let x = g.constant(x_val.clone());
                let coords = g.constant(coords_val.clone());
                let convs = ResBlockConvs {
                    conv1_w: ids[0],
                    conv1_b: ids[1],
                    conv2_w: ids[2],
                    conv2_b: None,
                };
                let cfg = ResBlockConfig {
                    feature_maps: c,
                    kernel_size: 3,
                    use_residual: true,
                    use_batch_norm: true,
                    placement: FilmPlacement::Standard,
                    use_coord_maps: true,
                };
                let mut rm = vec![0.0f64; c];
                let mut rv = vec![1.0f64; c];
                let out = resblock_forward(
                    g,
                    ResBlockIo {
                        x,
                        coords: Some(coords),
                        gamma: ids[3],
                        beta: ids[4],
                    },
                    &convs,
                    &cfg,
                    &mut |g, t, _affine| g.bn2d_train(t, None, None, &mut rm, &mut rv, 0.1, 1e-5),
                )?;
                Ok(g.sum_all(out))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }
}
