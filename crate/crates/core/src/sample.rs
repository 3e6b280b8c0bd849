//! Gaussian token selection and export of the unordered token set.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autoenc::AEModel;
use crate::error::{Error, Result};
use crate::geometry::GaussianField;
use crate::io::{atomic_write, read_file, Decoder, Encoder};

pub const TOKEN_MAGIC: [u8; 4] = *b"FSTK";
pub const TOKEN_VERSION: u32 = 1;
const NO_STRATEGY: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Entropy,
    Random,
    Density,
    Fps,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Entropy, Strategy::Random, Strategy::Density, Strategy::Fps];

    pub fn code(self) -> u8 {
        match self {
            Strategy::Entropy => 0,
            Strategy::Random => 1,
            Strategy::Density => 2,
            Strategy::Fps => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.code() == code)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Entropy => "entropy",
            Strategy::Random => "random",
            Strategy::Density => "density",
            Strategy::Fps => "fps",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy {s:?} (entropy|random|density|fps)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRequest {
    pub k: usize,
    pub strategy: Strategy,
    pub seed: u64,
    /// Neighbourhood radius in world units; density strategy only.
    pub density_radius: f64,
}

impl SampleRequest {
    pub fn new(strategy: Strategy, k: usize, seed: u64) -> Self {
        Self {
            k,
            strategy,
            seed,
            density_radius: 0.5,
        }
    }
}

/// Shannon entropy of `softmax(f)`, in nats.
///
/// Evaluated as `ln S − Σ p·(f − m)` with `m = max f` and `S = Σ e^(f − m)`,
/// so a constant vector gives exactly `ln D`.
pub fn feature_entropy(f: &[f64]) -> Result<f64> {
    if f.len() < 2 {
        return Err(Error::InvalidArgument(format!("entropy needs at least 2 components, got {}", f.len())));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("entropy of a non-finite feature".into()));
    }
    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = f.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let weighted: f64 = e.iter().zip(f).map(|(ei, v)| ei * (v - m)).sum::<f64>() / s;
    Ok((s.ln() - weighted).max(0.0))
}

/// Entropy of every Gaussian's feature, in index order.
pub fn field_entropies(field: &GaussianField) -> Result<Vec<f64>> {
    field.gaussians.par_iter().map(|g| feature_entropy(&g.feature)).collect()
}

/// The `k` highest-entropy Gaussians, highest first; ties by ascending index.
pub fn sample_entropy(field: &GaussianField, k: usize) -> Result<Vec<usize>> {
    check_k(k)?;
    let h = field_entropies(field)?;
    let mut order: Vec<usize> = (0..h.len()).collect();
    order.sort_by(|&a, &b| h[b].total_cmp(&h[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Uniform draw without replacement.
pub fn sample_random(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    check_k(k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, n, k.min(n)).into_vec())
}

/// Number of Gaussian means within `radius` of each mean, itself included.
pub fn density_counts(field: &GaussianField, radius: f64) -> Result<Vec<usize>> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidArgument(format!("density radius must be positive, got {radius}")));
    }
    let r2 = radius * radius;
    let means: Vec<_> = field.gaussians.iter().map(|g| g.mean).collect();
    Ok(means
        .par_iter()
        .map(|a| means.iter().filter(|b| (*a - **b).norm_squared() <= r2).count())
        .collect())
}

/// Sequential draws without replacement, each with probability
/// proportional to the remaining Gaussians' densities.
pub fn sample_density(field: &GaussianField, k: usize, seed: u64, radius: f64) -> Result<Vec<usize>> {
    check_k(k)?;
    let mut weight: Vec<f64> = density_counts(field, radius)?.into_iter().map(|c| c as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(k.min(weight.len()));
    for _ in 0..k.min(weight.len()) {
        let total: f64 = weight.iter().sum();
        let u = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in weight.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            acc += w;
            pick = Some(i);
            if u < acc {
                break;
            }
        }
        let i = pick.expect("positive remaining weight");
        weight[i] = 0.0;
        out.push(i);
    }
    Ok(out)
}

/// Greedy farthest-point sampling on the means. The first index is drawn
/// from the seed; later ties go to the lowest index.
pub fn sample_fps(field: &GaussianField, k: usize, seed: u64) -> Result<Vec<usize>> {
    check_k(k)?;
    let n = field.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let means: Vec<_> = field.gaussians.iter().map(|g| g.mean).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = rng.gen_range(0..n);
    let mut out = Vec::with_capacity(k.min(n));
    loop {
        taken[current] = true;
        out.push(current);
        if out.len() == k.min(n) {
            return Ok(out);
        }
        let c = means[current];
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            min_d[i] = min_d[i].min((means[i] - c).norm());
            if best.is_none_or(|b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        current = best.expect("unselected point remains");
    }
}

/// Dispatches on the requested strategy. Results are duplicate-free with
/// `min(k, N)` entries.
pub fn sample(field: &GaussianField, req: &SampleRequest) -> Result<Vec<usize>> {
    match req.strategy {
        Strategy::Entropy => sample_entropy(field, req.k),
        Strategy::Random => sample_random(field.len(), req.k, req.seed),
        Strategy::Density => sample_density(field, req.k, req.seed, req.density_radius),
        Strategy::Fps => sample_fps(field, req.k, req.seed),
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("token budget k must be at least 1".into()));
    }
    Ok(())
}

/// Token budget equivalent to `images` images of `patches` patches each.
pub fn budget(images: usize, patches: usize) -> usize {
    images.checked_mul(patches).expect("token budget overflows usize")
}

/// Decoded tokens with their source Gaussians. Row order carries no
/// meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub dim: usize,
    /// `len × dim`, row-major.
    pub tokens: Vec<f32>,
    pub source_indices: Vec<u64>,
    pub positions: Vec<[f32; 3]>,
    pub strategy: Option<Strategy>,
    pub seed: u64,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.source_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_indices.is_empty()
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }
}

/// Decodes the selected Gaussians' features into full-width tokens.
pub fn export_tokens(
    field: &GaussianField,
    decoder: &AEModel,
    indices: &[usize],
    strategy: Option<Strategy>,
    seed: u64,
) -> Result<TokenSet> {
    if decoder.latent_dim() != field.feature_dim {
        return Err(Error::dim("decoder input width vs field feature dim", decoder.latent_dim(), field.feature_dim));
    }
    let mut seen = vec![false; field.len()];
    for &i in indices {
        if i >= field.len() {
            return Err(Error::InvalidArgument(format!("index {i} out of range for {} Gaussians", field.len())));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidArgument(format!("index {i} selected twice")));
        }
    }
    let dim = decoder.output_dim();
    let mut tokens = Vec::with_capacity(indices.len() * dim);
    if !indices.is_empty() {
        let z = DMatrix::from_fn(indices.len(), field.feature_dim, |r, c| field.gaussians[indices[r]].feature[c]);
        let x = decoder.decode(&z)?;
        for r in 0..x.nrows() {
            tokens.extend(x.row(r).iter().map(|v| *v as f32));
        }
    }
    Ok(TokenSet {
        dim,
        tokens,
        source_indices: indices.iter().map(|&i| i as u64).collect(),
        positions: indices
            .iter()
            .map(|&i| {
                let m = field.gaussians[i].mean;
                [m.x as f32, m.y as f32, m.z as f32]
            })
            .collect(),
        strategy,
        seed,
    })
}

pub fn encode_tokens(set: &TokenSet) -> Vec<u8> {
    let mut e = Encoder::new();
    e.bytes(&TOKEN_MAGIC);
    e.u32(TOKEN_VERSION);
    e.u64(set.len() as u64);
    e.u32(set.dim as u32);
    e.u8(set.strategy.map_or(NO_STRATEGY, Strategy::code));
    e.u64(set.seed);
    for i in 0..set.len() {
        e.u64(set.source_indices[i]);
        for p in set.positions[i] {
            e.f32(p);
        }
        for t in set.token(i) {
            e.f32(*t);
        }
    }
    e.buf
}

pub fn decode_tokens(path: &Path, bytes: &[u8]) -> Result<TokenSet> {
    let mut d = Decoder::new(path, bytes);
    d.header(TOKEN_MAGIC, TOKEN_VERSION)?;
    let count = d.u64("token count")?;
    let dim = d.u32("token width")? as usize;
    let strategy = match d.u8("strategy code")? {
        NO_STRATEGY => None,
        c => Some(Strategy::from_code(c).ok_or_else(|| d.malformed(format!("unknown strategy code {c}")))?),
    };
    let seed = d.u64("seed")?;
    let record = 8 + 12 + 4 * dim;
    let count = d.count(count, record, "token records")?;
    let mut set = TokenSet {
        dim,
        tokens: Vec::with_capacity(count * dim),
        source_indices: Vec::with_capacity(count),
        positions: Vec::with_capacity(count),
        strategy,
        seed,
    };
    for _ in 0..count {
        set.source_indices.push(d.u64("source index")?);
        set.positions.push([d.f32("position")?, d.f32("position")?, d.f32("position")?]);
        for _ in 0..dim {
            set.tokens.push(d.f32("token")?);
        }
    }
    d.finish()?;
    let mut sorted = set.source_indices.clone();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(d.malformed("duplicate source index"));
    }
    Ok(set)
}

pub fn save_tokens(path: &Path, set: &TokenSet) -> Result<()> {
    atomic_write(path, &encode_tokens(set))
}

pub fn load_tokens(path: &Path) -> Result<TokenSet> {
    decode_tokens(path, &read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Gaussian;
    use nalgebra::Vector3;
    use proptest::{collection, prop_assert, prop_assert_eq, proptest};

    fn field_from(features: Vec<Vec<f64>>, means: Option<Vec<Vector3<f64>>>) -> GaussianField {
        let d = features[0].len();
        let gs = features
            .into_iter()
            .enumerate()
            .map(|(i, f)| {
                let m = means.as_ref().map_or(Vector3::new(i as f64, 0.0, 0.0), |m| m[i]);
                Gaussian::isotropic(m, 0.1, 0.5, f)
            })
            .collect();
        GaussianField::new(gs, d)
    }

    fn random_field(n: usize, d: usize, seed: u64) -> GaussianField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let means = (0..n)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        field_from(feats, Some(means))
    }

    #[test]
    fn entropy_of_constant_is_ln_d_exactly() {
        for d in [2usize, 16, 256] {
            for c in [0.0, -3.5, 1e3] {
                assert_eq!(feature_entropy(&vec![c; d]).unwrap(), (d as f64).ln());
            }
        }
    }

    #[test]
    fn entropy_two_component_value() {
        // p = e/(e+1); H = −p ln p − (1−p) ln(1−p), evaluated independently
        assert!((feature_entropy(&[1.0, 0.0]).unwrap() - 0.5822031088882179).abs() < 1e-15);
    }

    #[test]
    fn entropy_one_hot_limit_and_errors() {
        assert!(feature_entropy(&[800.0, 0.0, 0.0]).unwrap() < 1e-300);
        assert!(feature_entropy(&[1.0]).is_err());
        assert!(feature_entropy(&[1.0, f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn entropy_bounded_and_shift_invariant(f in collection::vec(-20.0f64..20.0, 2..40), c in -50.0f64..50.0) {
            let h = feature_entropy(&f).unwrap();
            prop_assert!(h >= 0.0 && h <= (f.len() as f64).ln() + 1e-12);
            let g: Vec<f64> = f.iter().map(|v| v + c).collect();
            prop_assert!((feature_entropy(&g).unwrap() - h).abs() < 1e-12);
        }

        #[test]
        fn entropy_selection_permutation_invariant(seed in 0u64..1000, k in 1usize..12) {
            let field = random_field(30, 6, seed);
            let picked = sample_entropy(&field, k).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
            let mut perm: Vec<usize> = (0..30).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let shuffled = GaussianField::new(perm.iter().map(|&p| field.gaussians[p].clone()).collect(), 6);
            let mut a: Vec<usize> = sample_entropy(&shuffled, k).unwrap().into_iter().map(|i| perm[i]).collect();
            let mut b = picked;
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn entropy_picks_the_uniform_gaussian() {
        let mut feats: Vec<Vec<f64>> = (0..10).map(|i| {
            let mut v = vec![0.0; 8];
            v[i % 8] = 10.0;
            v
        }).collect();
        feats[7] = vec![0.25; 8];
        let f = field_from(feats, None);
        assert_eq!(sample_entropy(&f, 1).unwrap(), vec![7]);
        assert_eq!(sample_entropy(&f, 10).unwrap().len(), 10);
        let zeros = field_from(vec![vec![0.0; 4]; 5], None);
        assert_eq!(sample_entropy(&zeros, 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn entropy_matches_brute_force_ranking() {
        let field = random_field(60, 10, 3);
        let mut ranked: Vec<(f64, usize)> = field
            .gaussians
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let z: f64 = g.feature.iter().map(|v| v.exp()).sum();
                let h = -g.feature.iter().map(|v| v.exp() / z).map(|p| p * p.ln()).sum::<f64>();
                (h, i)
            })
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let expect: Vec<usize> = ranked[..10].iter().map(|r| r.1).collect();
        assert_eq!(sample_entropy(&field, 10).unwrap(), expect);
    }

    #[test]
    fn random_is_uniform() {
        let mut counts = [0usize; 4];
        let trials = 10_000;
        for seed in 0..trials {
            counts[sample_random(4, 1, seed).unwrap()[0]] += 1;
        }
        let mean = trials as f64 / 4.0;
        let sigma = (trials as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 5.0 * sigma, "{counts:?}");
        }
        let mut all = sample_random(7, 7, 1).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        assert_eq!(sample_random(7, 3, 9).unwrap(), sample_random(7, 3, 9).unwrap());
    }

    fn cluster_field() -> GaussianField {
        let mut means: Vec<Vector3<f64>> = (0..9).map(|i| Vector3::new(0.01 * i as f64, 0.0, 0.0)).collect();
        means.push(Vector3::new(10.0, 0.0, 0.0));
        field_from(vec![vec![0.0, 0.0]; 10], Some(means))
    }

    #[test]
    fn density_counts_and_selection_frequency() {
        let f = cluster_field();
        let counts = density_counts(&f, 0.5).unwrap();
        assert_eq!(counts, vec![9, 9, 9, 9, 9, 9, 9, 9, 9, 1]);
        let trials = 10_000u64;
        let isolated = (0..trials).filter(|&s| sample_density(&f, 1, s, 0.5).unwrap()[0] == 9).count() as f64;
        let p = 1.0 / 82.0;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        assert!((isolated - trials as f64 * p).abs() < 5.0 * sigma, "isolated picked {isolated} times");
        assert!(density_counts(&f, 0.0).is_err());
    }

    #[test]
    fn density_equal_weights_and_full_draw() {
        let f = cluster_field();
        let mut all = sample_density(&f, 20, 4, 0.5).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn fps_square_diagonal() {
        let means = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let f = field_from(vec![vec![0.0, 0.0]; 4], Some(means));
        for seed in 0..8 {
            let s = sample_fps(&f, 2, seed).unwrap();
            assert_eq!(s[1], (s[0] + 2) % 4);
            assert_eq!(sample_fps(&f, 1, seed).unwrap(), vec![s[0]]);
        }
    }

    #[test]
    fn fps_greedy_property() {
        let f = random_field(100, 2, 5);
        let s = sample_fps(&f, 10, 5).unwrap();
        let dist = |i: usize, sel: &[usize]| sel.iter().map(|&j| (f.gaussians[i].mean - f.gaussians[j].mean).norm()).fold(f64::INFINITY, f64::min);
        for step in 1..s.len() {
            let prior = &s[..step];
            let chosen = dist(s[step], prior);
            for i in (0..100).filter(|i| !s[..=step].contains(i)) {
                assert!(chosen >= dist(i, prior));
            }
        }
    }

    #[test]
    fn all_strategies_distinct_clamped_reproducible() {
        let f = random_field(25, 4, 8);
        for strat in Strategy::ALL {
            for k in [1, 7, 25, 40] {
                let req = SampleRequest::new(strat, k, 11);
                let a = sample(&f, &req).unwrap();
                assert_eq!(a, sample(&f, &req).unwrap());
                assert_eq!(a.len(), k.min(25));
                let mut s = a.clone();
                s.sort_unstable();
                s.dedup();
                assert_eq!(s.len(), a.len());
            }
            assert!(sample(&f, &SampleRequest::new(strat, 0, 1)).is_err());
        }
    }

    #[test]
    fn strategy_names_and_codes() {
        for s in Strategy::ALL {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
            assert_eq!(Strategy::from_code(s.code()), Some(s));
        }
        assert!("kmeans".parse::<Strategy>().is_err());
    }

    #[test]
    fn budgets() {
        assert_eq!(budget(44, 729), 32_076);
        assert_eq!(budget(1, 729), 729);
        assert_eq!(27 * 27, 729);
    }

    fn identity_decoder(d: usize) -> AEModel {
        use crate::autoenc::{Layer, Linear, LossWeights};
        let lin = |b: bool| {
            Layer::Linear(Linear {
                weight: DMatrix::identity(d, d),
                bias: if b { Some(nalgebra::DVector::zeros(d)) } else { None },
            })
        };
        AEModel::from_layers(vec![lin(false), Layer::SphereNormalize], vec![lin(true)], LossWeights::default()).unwrap()
    }

    #[test]
    fn export_clamps_and_round_trips() {
        let f = field_from(vec![vec![0.5, -1.0, 2.0], vec![1.0, 1.0, 1.0]], None);
        let dec = identity_decoder(3);
        let picked = sample_entropy(&f, 3).unwrap();
        assert_eq!(picked.len(), 2);
        let set = export_tokens(&f, &dec, &picked, Some(Strategy::Entropy), 4).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.token(1), &[0.5f32, -1.0, 2.0]);
        assert_eq!(set.positions[1], [0.0, 0.0, 0.0]);
        let p = Path::new("mem.tok");
        assert_eq!(decode_tokens(p, &encode_tokens(&set)).unwrap(), set);
        assert!(export_tokens(&f, &identity_decoder(4), &picked, None, 0).is_err());
        assert!(export_tokens(&f, &dec, &[0, 0], None, 0).is_err());
        assert!(export_tokens(&f, &dec, &[5], None, 0).is_err());
    }

    #[test]
    fn token_file_errors() {
        let f = field_from(vec![vec![0.5, -1.0]], None);
        let set = export_tokens(&f, &identity_decoder(2), &[0], None, 0).unwrap();
        let bytes = encode_tokens(&set);
        let p = Path::new("mem.tok");
        assert!(matches!(decode_tokens(p, &bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"FSGF");
        assert!(matches!(decode_tokens(p, &bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[20] = 17;
        assert!(matches!(decode_tokens(p, &bad), Err(Error::Malformed { .. })));
        let empty = TokenSet { dim: 3, tokens: vec![], source_indices: vec![], positions: vec![], strategy: None, seed: 0 };
        assert_eq!(decode_tokens(p, &encode_tokens(&empty)).unwrap(), empty);
    }
}
