//! Weight-space alignment via hidden-unit permutation matching.
//!
//! Hidden channels of a network can be permuted without changing its
//! function, so checkpoints trained from different seeds live in different
//! bases. This module finds, per model, the permutation set minimizing the
//! vectorized L2 distance to a fixed reference model (coordinate descent
//! over layer boundaries, each step a linear sum assignment) and applies it
//! so the whole population shares one canonical basis.

use rayon::prelude::*;

use crate::assignment::{lexicographic_min_assignment, CostMatrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::zoo::{AlignmentRecord, Architecture, LayerKind, ModelCheckpoint, Split, Zoo};

/// A permutable hidden boundary: the layer producing the representation,
/// an optional batch norm acting on it, and the layer consuming it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Boundary {
    pub producer: usize,
    pub bn: Option<usize>,
    pub consumer: usize,
    pub width: usize,
}

/// One permutation per boundary (in [`find_boundaries`] order); input and
/// output boundaries stay identity. `perm[i]` is the source channel placed
/// at position `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationSet {
    pub perms: Vec<Vec<usize>>,
}

impl PermutationSet {
    pub fn identity(arch: &Architecture) -> Self {
        Self {
            perms: find_boundaries(arch)
                .iter()
                .map(|b| (0..b.width).collect())
                .collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.perms
            .iter()
            .all(|p| p.iter().enumerate().all(|(i, &v)| i == v))
    }

    pub fn inverse(&self) -> Self {
        Self {
            perms: self.perms.iter().map(|p| invert(p)).collect(),
        }
    }
}

pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Uniformly random valid permutation set for an architecture.
pub fn random_permutation_set(
    arch: &Architecture,
    rng: &mut impl rand::Rng,
) -> PermutationSet {
    use rand::seq::SliceRandom;
    PermutationSet {
        perms: find_boundaries(arch)
            .iter()
            .map(|b| {
                let mut p: Vec<usize> = (0..b.width).collect();
                p.shuffle(rng);
                p
            })
            .collect(),
    }
}

/// Permutable boundaries of an architecture: every dense/conv layer except
/// the last, paired with the next dense/conv layer (batch norm in between
/// rides along with the producer).
pub fn find_boundaries(arch: &Architecture) -> Vec<Boundary> {
    let mut out = Vec::new();
    for (i, spec) in arch.layers.iter().enumerate() {
        if spec.kind == LayerKind::BatchNorm {
            continue;
        }
        let mut bn = None;
        let mut consumer = None;
        for (j, next) in arch.layers.iter().enumerate().skip(i + 1) {
            match next.kind {
                LayerKind::BatchNorm => bn = Some(j),
                _ => {
                    consumer = Some(j);
                    break;
                }
            }
        }
        if let Some(consumer) = consumer {
            out.push(Boundary {
                producer: i,
                bn,
                consumer,
                width: spec.out_dim,
            });
        }
    }
    out
}

/// Spatial geometry (height, width, channels) of each layer's input.
fn input_geometry(arch: &Architecture) -> Vec<(usize, usize, usize)> {
    let mut geo = Vec::with_capacity(arch.layers.len());
    let (mut h, mut w, mut c) = match arch.input {
        crate::zoo::InputShape::Flat(d) => (1, 1, d),
        crate::zoo::InputShape::Image {
            height,
            width,
            channels,
        } => (height, width, channels),
    };
    for spec in &arch.layers {
        geo.push((h, w, c));
        match spec.kind {
            LayerKind::Dense => {
                h = 1;
                w = 1;
                c = spec.out_dim;
            }
            LayerKind::Conv2d => {
                h -= spec.kernel - 1;
                w -= spec.kernel - 1;
                c = spec.out_dim;
            }
            LayerKind::BatchNorm => {}
        }
    }
    geo
}

/// (outer, inner) column grouping of a consumer layer: its input columns are
/// laid out outer-major, then channel, then inner.
fn consumer_grouping(arch: &Architecture, consumer: usize) -> (usize, usize) {
    let spec = &arch.layers[consumer];
    match spec.kind {
        LayerKind::Conv2d => (1, spec.kernel * spec.kernel),
        LayerKind::Dense => {
            let (h, w, _) = input_geometry(arch)[consumer];
            (h * w, 1)
        }
        LayerKind::BatchNorm => unreachable!("batch norm is never a boundary consumer"),
    }
}

fn gather_rows<T: Scalar>(w: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let (_, cols) = w.dims2().expect("weights are 2-D");
    let mut out = Tensor::zeros(&[perm.len(), cols]);
    for (i, &s) in perm.iter().enumerate() {
        out.row_mut(i).copy_from_slice(w.row(s));
    }
    out
}

fn gather_vec<T: Scalar>(v: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let mut out = v.clone();
    for (i, &s) in perm.iter().enumerate() {
        out.data_mut()[i] = v.data()[s];
    }
    out
}

fn gather_middle_cols<T: Scalar>(
    w: &Tensor<T>,
    perm: &[usize],
    outer: usize,
    inner: usize,
) -> Tensor<T> {
    let (rows, cols) = w.dims2().expect("weights are 2-D");
    let width = perm.len();
    debug_assert_eq!(outer * width * inner, cols);
    let mut out = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        let src = w.row(r).to_vec();
        let dst = out.row_mut(r);
        for o in 0..outer {
            for (i, &s) in perm.iter().enumerate() {
                let d0 = (o * width + i) * inner;
                let s0 = (o * width + s) * inner;
                dst[d0..d0 + inner].copy_from_slice(&src[s0..s0 + inner]);
            }
        }
    }
    out
}

/// Re-index a checkpoint's hidden channels. Producer rows (and bias),
/// in-between BN parameters and buffers, and consumer input columns move
/// together, so the network function is preserved.
pub fn apply_permutation<T: Scalar>(
    m: &ModelCheckpoint<T>,
    pset: &PermutationSet,
) -> Result<ModelCheckpoint<T>> {
    let boundaries = find_boundaries(&m.arch);
    if boundaries.len() != pset.perms.len() {
        return Err(Error::Dimension(format!(
            "permutation set has {} boundaries, architecture has {}",
            pset.perms.len(),
            boundaries.len()
        )));
    }
    let mut out = m.clone();
    for (b, perm) in boundaries.iter().zip(&pset.perms) {
        if perm.len() != b.width {
            return Err(Error::Dimension(format!(
                "boundary at layer {} has width {}, permutation has {}",
                b.producer,
                b.width,
                perm.len()
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::Argument("permutation is not a bijection".into()));
            }
            seen[p] = true;
        }
        let prod = &mut out.layers[b.producer];
        prod.weight = gather_rows(&prod.weight, perm);
        if let Some(bias) = &mut prod.bias {
            *bias = gather_vec(bias, perm);
        }
        if let Some(bi) = b.bn {
            let bn = &mut out.layers[bi];
            bn.weight = gather_vec(&bn.weight, perm);
            if let Some(bias) = &mut bn.bias {
                *bias = gather_vec(bias, perm);
            }
            if let Some(buf) = &mut out.buffers[bi] {
                buf.running_mean = gather_vec(&buf.running_mean, perm);
                buf.running_var = gather_vec(&buf.running_var, perm);
            }
        }
        let (outer, inner) = consumer_grouping(&m.arch, b.consumer);
        let cons = &mut out.layers[b.consumer];
        cons.weight = gather_middle_cols(&cons.weight, perm, outer, inner);
    }
    Ok(out)
}

/// Vectorized L2 distance over dense/conv weights and biases (BN parameters
/// excluded, matching the alignment objective).
pub fn vec_l2_distance<T: Scalar>(a: &ModelCheckpoint<T>, b: &ModelCheckpoint<T>) -> f64 {
    let mut sum = 0.0f64;
    for (i, spec) in a.arch.layers.iter().enumerate() {
        if spec.kind == LayerKind::BatchNorm {
            continue;
        }
        for (x, y) in a.layers[i].weight.data().iter().zip(b.layers[i].weight.data()) {
            let d = x.as_f64() - y.as_f64();
            sum += d * d;
        }
        if let (Some(ba), Some(bb)) = (&a.layers[i].bias, &b.layers[i].bias) {
            for (x, y) in ba.data().iter().zip(bb.data()) {
                let d = x.as_f64() - y.as_f64();
                sum += d * d;
            }
        }
    }
    sum.sqrt()
}

fn total_similarity<T: Scalar>(a: &ModelCheckpoint<T>, b: &ModelCheckpoint<T>) -> f64 {
    let mut sum = 0.0f64;
    for (i, spec) in a.arch.layers.iter().enumerate() {
        if spec.kind == LayerKind::BatchNorm {
            continue;
        }
        for (x, y) in a.layers[i].weight.data().iter().zip(b.layers[i].weight.data()) {
            sum += x.as_f64() * y.as_f64();
        }
        if let (Some(ba), Some(bb)) = (&a.layers[i].bias, &b.layers[i].bias) {
            for (x, y) in ba.data().iter().zip(bb.data()) {
                sum += x.as_f64() * y.as_f64();
            }
        }
    }
    sum
}

#[derive(Debug, Clone)]
pub struct Matching {
    pub perms: PermutationSet,
    /// Vec-L2 distance between the reference and the aligned model.
    pub residual: f64,
    /// Matching objective (total inner product) after each sweep;
    /// non-decreasing by construction.
    pub objective_trace: Vec<f64>,
}

pub const DEFAULT_MAX_SWEEPS: usize = 50;

/// Find the permutation set aligning `b` to the reference `a` by coordinate
/// descent: per sweep, each boundary solves a linear sum assignment
/// maximizing the inner product of the two weight matrices touching it,
/// holding the other boundaries fixed.
pub fn weight_matching<T: Scalar>(
    a: &ModelCheckpoint<T>,
    b: &ModelCheckpoint<T>,
    max_sweeps: usize,
) -> Result<Matching> {
    if a.arch != b.arch {
        return Err(Error::Argument(
            "weight matching requires identical architectures".into(),
        ));
    }
    let boundaries = find_boundaries(&a.arch);
    let mut perms = PermutationSet::identity(&a.arch);
    let mut trace = vec![total_similarity(a, &apply_permutation(b, &perms)?)];
    for _ in 0..max_sweeps {
        for (bi, boundary) in boundaries.iter().enumerate() {
            // subproblem view: all other boundaries at their current
            // permutations, this one at identity
            let mut probe = perms.clone();
            probe.perms[bi] = (0..boundary.width).collect();
            let bp = apply_permutation(b, &probe)?;
            let n = boundary.width;
            let mut sim = vec![0.0f64; n * n];
            // producer rows (bias included)
            let aw = &a.layers[boundary.producer].weight;
            let bw = &bp.layers[boundary.producer].weight;
            for i in 0..n {
                for j in 0..n {
                    let mut s = 0.0f64;
                    for (x, y) in aw.row(i).iter().zip(bw.row(j)) {
                        s += x.as_f64() * y.as_f64();
                    }
                    sim[i * n + j] += s;
                }
            }
            if let (Some(ba), Some(bb)) = (
                &a.layers[boundary.producer].bias,
                &bp.layers[boundary.producer].bias,
            ) {
                for i in 0..n {
                    for j in 0..n {
                        sim[i * n + j] += ba.data()[i].as_f64() * bb.data()[j].as_f64();
                    }
                }
            }
            // consumer column groups
            let (outer, inner) = consumer_grouping(&a.arch, boundary.consumer);
            let ac = &a.layers[boundary.consumer].weight;
            let bc = &bp.layers[boundary.consumer].weight;
            let rows = ac.dims2()?.0;
            for r in 0..rows {
                let ar = ac.row(r);
                let br = bc.row(r);
                for o in 0..outer {
                    for i in 0..n {
                        let a0 = (o * n + i) * inner;
                        for j in 0..n {
                            let b0 = (o * n + j) * inner;
                            let mut s = 0.0f64;
                            for k in 0..inner {
                                s += ar[a0 + k].as_f64() * br[b0 + k].as_f64();
                            }
                            sim[i * n + j] += s;
                        }
                    }
                }
            }
            // maximize similarity = minimize negated cost
            let cost = CostMatrix::new(n, sim.iter().map(|&s| -s).collect())?;
            let (perm, _) = lexicographic_min_assignment(&cost);
            perms.perms[bi] = perm;
        }
        let obj = total_similarity(a, &apply_permutation(b, &perms)?);
        let prev = *trace.last().expect("trace is never empty");
        trace.push(obj);
        if obj <= prev + 1e-9 * (1.0 + prev.abs()) {
            break;
        }
    }
    let residual = vec_l2_distance(a, &apply_permutation(b, &perms)?);
    Ok(Matching {
        perms,
        residual,
        objective_trace: trace,
    })
}

/// Align every model of a zoo to one reference model. The permutation is
/// computed on each model's last snapshot and applied to all of its epochs;
/// the permutations are recorded in the manifest.
pub fn align_zoo<T: Scalar>(zoo: &Zoo<T>, reference_id: &str) -> Result<Zoo<T>> {
    let epochs = zoo.snapshot_epochs();
    let last = *epochs
        .last()
        .ok_or_else(|| Error::Data("zoo has no checkpoints".into()))?;
    if !zoo.split_ids(Split::Train).iter().any(|id| id == reference_id) {
        return Err(Error::Config(format!(
            "reference model {reference_id} is not in the training split"
        )));
    }
    let reference = zoo
        .checkpoint(reference_id, last)
        .ok_or_else(|| Error::Data(format!("missing last-epoch checkpoint for {reference_id}")))?;

    let mut ids: Vec<String> = zoo
        .manifest
        .entries
        .iter()
        .filter(|e| !e.excluded)
        .map(|e| e.model_id.clone())
        .collect();
    ids.sort();
    ids.dedup();

    let matchings: Vec<Result<(String, PermutationSet)>> = ids
        .par_iter()
        .map(|id| {
            let m = zoo
                .checkpoint(id, last)
                .ok_or_else(|| Error::Data(format!("missing last-epoch checkpoint for {id}")))?;
            let matching = weight_matching(reference, m, DEFAULT_MAX_SWEEPS)?;
            Ok((id.clone(), matching.perms))
        })
        .collect();

    let mut record = AlignmentRecord {
        reference_model: reference_id.to_string(),
        permutations: Default::default(),
    };
    let mut by_id = std::collections::BTreeMap::new();
    for m in matchings {
        let (id, perms) = m?;
        record.permutations.insert(id.clone(), perms.perms.clone());
        by_id.insert(id, perms);
    }

    let checkpoints = zoo
        .checkpoints
        .par_iter()
        .map(|c| {
            let perms = by_id
                .get(&c.meta.model_id)
                .ok_or_else(|| Error::Data(format!("no alignment for {}", c.meta.model_id)))?;
            apply_permutation(c, perms)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut manifest = zoo.manifest.clone();
    manifest.alignment = Some(record);
    Ok(Zoo {
        manifest,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::zoo::{
        evaluate, generate_task, leaf_model, train_zoo, CheckpointMeta, Dataset, InputShape,
        TaskSpec, TrainSettings,
    };
    use crate::zoo::forward_model;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_checkpoint(arch: &Architecture, seed: u64) -> ModelCheckpoint<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = ModelCheckpoint::init(
            arch,
            CheckpointMeta {
                model_id: format!("a{seed}"),
                seed,
                epoch: 0,
            },
            &mut rng,
        )
        .unwrap();
        for l in &mut m.layers {
            if let Some(b) = &mut l.bias {
                *b = Tensor::randn(b.shape(), 0.5, &mut rng);
            }
        }
        m
    }

    fn random_pset(arch: &Architecture, seed: u64) -> PermutationSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PermutationSet {
            perms: find_boundaries(arch)
                .iter()
                .map(|b| {
                    let mut p: Vec<usize> = (0..b.width).collect();
                    p.shuffle(&mut rng);
                    p
                })
                .collect(),
        }
    }

    fn logits(m: &ModelCheckpoint<f32>, inputs: &Tensor<f32>) -> Tensor<f32> {
        let mut g = Graph::new();
        let vars = leaf_model(&mut g, m, false);
        let input = g.constant(inputs.clone());
        let (out, _) = forward_model(&mut g, &vars, m, input, false).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn identity_permutation_is_a_no_op() {
        let arch = Architecture::conv_bn_net(8, 8, 1, &[4, 4], 3, 3);
        let m = random_checkpoint(&arch, 1);
        let out = apply_permutation(&m, &PermutationSet::identity(&arch)).unwrap();
        assert_eq!(out.layers, m.layers);
        assert_eq!(out.buffers, m.buffers);
    }

    #[test]
    fn permutation_then_inverse_is_bit_identical() {
        for arch in [
            Architecture::mlp(&[3, 7, 5, 2]),
            Architecture::conv_bn_net(8, 8, 1, &[4, 4], 3, 3),
        ] {
            let m = random_checkpoint(&arch, 2);
            let p = random_pset(&arch, 3);
            let there = apply_permutation(&m, &p).unwrap();
            let back = apply_permutation(&there, &p.inverse()).unwrap();
            assert_eq!(back.layers, m.layers);
            assert_eq!(back.buffers, m.buffers);
        }
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let arch = Architecture::mlp(&[3, 5, 2]);
        let m = random_checkpoint(&arch, 4);
        let p = PermutationSet {
            perms: vec![vec![0, 1, 2]],
        };
        assert!(matches!(
            apply_permutation(&m, &p),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn mlp_logits_invariant_under_permutation() {
        let arch = Architecture::mlp(&[3, 8, 8, 2]);
        let m = random_checkpoint(&arch, 5);
        let p = random_pset(&arch, 6);
        let pm = apply_permutation(&m, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f32>::randn(&[100, 3], 1.0, &mut rng);
        let a = logits(&m, &x);
        let b = logits(&pm, &x);
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-5, "{u} vs {v}");
        }
    }

    #[test]
    fn cnn_with_bn_logits_invariant_under_permutation() {
        let arch = Architecture::conv_bn_net(8, 8, 1, &[4, 4], 3, 3);
        let m = random_checkpoint(&arch, 8);
        let p = random_pset(&arch, 9);
        let pm = apply_permutation(&m, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::<f32>::randn(&[20, 64], 1.0, &mut rng);
        let a = logits(&m, &x);
        let b = logits(&pm, &x);
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-4, "{u} vs {v}");
        }
    }

    #[test]
    fn matching_a_model_to_itself_is_identity() {
        let arch = Architecture::mlp(&[3, 8, 8, 2]);
        let m = random_checkpoint(&arch, 11);
        let matching = weight_matching(&m, &m, DEFAULT_MAX_SWEEPS).unwrap();
        assert!(matching.perms.is_identity());
        assert_eq!(matching.residual, 0.0);
    }

    #[test]
    fn planted_permutation_recovered_exactly() {
        for (seed, arch) in [
            (12u64, Architecture::mlp(&[3, 8, 8, 2])),
            (13, Architecture::mlp(&[2, 6, 4, 3])),
            (14, Architecture::conv_bn_net(8, 8, 1, &[8, 8], 3, 3)),
        ] {
            let a = random_checkpoint(&arch, seed);
            let planted = random_pset(&arch, seed + 100);
            let b = apply_permutation(&a, &planted).unwrap();
            let matching = weight_matching(&a, &b, DEFAULT_MAX_SWEEPS).unwrap();
            // aligning back composes to the inverse of the planted set
            assert_eq!(matching.perms, planted.inverse());
            assert!(matching.residual < 1e-4, "residual {}", matching.residual);
        }
    }

    #[test]
    fn matched_cost_equals_exhaustive_minimum() {
        fn permutations(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![Vec::new()];
            }
            let mut out = Vec::new();
            for rest in permutations(n - 1) {
                for pos in 0..n {
                    let mut p = rest.clone();
                    p.insert(pos, n - 1);
                    out.push(p);
                }
            }
            out
        }
        let arch = Architecture::mlp(&[3, 4, 2]);
        for seed in 0..5u64 {
            let a = random_checkpoint(&arch, 20 + seed);
            let b = random_checkpoint(&arch, 40 + seed);
            let matching = weight_matching(&a, &b, DEFAULT_MAX_SWEEPS).unwrap();
            let brute = permutations(4)
                .into_iter()
                .map(|p| {
                    let aligned =
                        apply_permutation(&b, &PermutationSet { perms: vec![p] }).unwrap();
                    vec_l2_distance(&a, &aligned)
                })
                .fold(f64::INFINITY, f64::min);
            assert!(
                (matching.residual - brute).abs() < 1e-5,
                "matched {} vs exhaustive {brute}",
                matching.residual
            );
        }
    }

    #[test]
    fn objective_never_decreases_across_sweeps() {
        let arch = Architecture::mlp(&[3, 6, 6, 2]);
        for seed in 0..5u64 {
            let a = random_checkpoint(&arch, 60 + seed);
            let b = random_checkpoint(&arch, 80 + seed);
            let matching = weight_matching(&a, &b, DEFAULT_MAX_SWEEPS).unwrap();
            for w in matching.objective_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "objective dropped: {:?}", w);
            }
        }
    }

    fn small_zoo(seed: u64) -> Zoo<f32> {
        let arch = Architecture::mlp(&[2, 8, 3]);
        let task = TaskSpec {
            generator: "gaussian-blobs".into(),
            classes: 3,
            input: InputShape::Flat(2),
            noise: 0.5,
            seed,
        };
        let settings = TrainSettings {
            epochs: 2,
            snapshot_epochs: vec![1, 2],
            batch_size: 32,
            lr: 2e-3,
            weight_decay: 1e-4,
        };
        train_zoo(&arch, &task, 10, 128, 64, &settings, seed).unwrap()
    }

    #[test]
    fn aligning_reference_to_itself_is_unchanged() {
        let zoo = small_zoo(90);
        let reference = zoo.split_ids(Split::Train)[0].clone();
        let aligned = align_zoo(&zoo, &reference).unwrap();
        let last = *zoo.snapshot_epochs().last().unwrap();
        let before = zoo.checkpoint(&reference, last).unwrap();
        let after = aligned.checkpoint(&reference, last).unwrap();
        assert_eq!(before.layers, after.layers);
        let record = aligned.manifest.alignment.as_ref().unwrap();
        assert_eq!(record.reference_model, reference);
        assert_eq!(record.permutations.len(), 10);
    }

    #[test]
    fn alignment_reduces_distance_to_reference() {
        let zoo = small_zoo(91);
        let reference = zoo.split_ids(Split::Train)[0].clone();
        let aligned = align_zoo(&zoo, &reference).unwrap();
        let last = *zoo.snapshot_epochs().last().unwrap();
        let ref_ckpt = zoo.checkpoint(&reference, last).unwrap();
        let mut closer = 0;
        let mut others = 0;
        for e in &zoo.manifest.entries {
            if e.epoch != last || e.model_id == reference {
                continue;
            }
            others += 1;
            let before = vec_l2_distance(ref_ckpt, zoo.checkpoint(&e.model_id, last).unwrap());
            let after =
                vec_l2_distance(ref_ckpt, aligned.checkpoint(&e.model_id, last).unwrap());
            if after < before {
                closer += 1;
            }
        }
        assert!(closer >= others - 1, "only {closer}/{others} models moved closer");
    }

    #[test]
    fn alignment_preserves_model_function() {
        let zoo = small_zoo(92);
        let reference = zoo.split_ids(Split::Train)[0].clone();
        let aligned = align_zoo(&zoo, &reference).unwrap();
        let data: Dataset<f32> = generate_task(&zoo.manifest.task, 64).unwrap();
        for (a, b) in zoo.checkpoints.iter().zip(&aligned.checkpoints) {
            let (acc_a, _) = evaluate(a, &data).unwrap();
            let (acc_b, _) = evaluate(b, &data).unwrap();
            assert!((acc_a - acc_b).abs() < 1e-9);
        }
    }
}
