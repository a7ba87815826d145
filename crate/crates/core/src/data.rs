//! Seeded synthetic datasets, subsetting, batching and the `LOTD` dump format.

use std::io::{Read, Write};

use lot_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{data_err, LotError, Result};
use crate::seed::{derive_seed, rng_from};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `[n, d]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    IdenticalToTrain,
    IndependentDraw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledDataset {
    /// `[m, d]`, `m ≥ 1`.
    pub inputs: Tensor,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, class_count: usize, seed: u64) -> Result<Self> {
        if inputs.ndim() != 2 {
            return data_err(format!("inputs must be a matrix, got shape {:?}", inputs.shape()));
        }
        if inputs.shape()[0] != labels.len() {
            return data_err(format!("{} input rows but {} labels", inputs.shape()[0], labels.len()));
        }
        if class_count < 2 {
            return data_err("class_count must be at least 2");
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return data_err(format!("label {bad} out of range for {class_count} classes"));
        }
        Ok(Self { inputs, labels, class_count, seed })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Rows `indices` as a `[b, d]` matrix plus their labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let inputs = gather_rows(&self.inputs, indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (inputs, labels)
    }

    /// The same inputs with labels dropped.
    pub fn unlabeled(&self) -> UnlabeledDataset {
        UnlabeledDataset {
            inputs: self.inputs.clone(),
            provenance: Provenance::IdenticalToTrain,
        }
    }
}

impl UnlabeledDataset {
    pub fn new(inputs: Tensor, provenance: Provenance) -> Result<Self> {
        if inputs.ndim() != 2 || inputs.shape()[0] == 0 {
            return data_err(format!("unlabeled inputs must be a non-empty matrix, got {:?}", inputs.shape()));
        }
        Ok(Self { inputs, provenance })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn gather(&self, indices: &[usize]) -> Tensor {
        gather_rows(&self.inputs, indices)
    }
}

pub(crate) fn gather_rows(m: &Tensor, indices: &[usize]) -> Tensor {
    let d = m.shape()[1];
    let src = m.data();
    let mut out = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        out.extend_from_slice(&src[i * d..(i + 1) * d]);
    }
    Tensor::matrix(indices.len(), d, out).expect("gathered rows have matching length")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterParams {
    pub class_count: usize,
    pub dim: usize,
    pub per_class_count: usize,
    pub cluster_spread: f64,
    pub label_noise_rate: f64,
}

impl ClusterParams {
    fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return data_err("class_count must be at least 2");
        }
        if self.dim == 0 || self.per_class_count == 0 {
            return data_err("dim and per_class_count must be positive");
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return data_err(format!("cluster_spread must be finite and non-negative, got {}", self.cluster_spread));
        }
        if !(0.0..=1.0).contains(&self.label_noise_rate) {
            return data_err(format!("label_noise_rate must lie in [0, 1], got {}", self.label_noise_rate));
        }
        Ok(())
    }
}

/// Class means drawn from a standard normal, one per class.
pub fn cluster_means(class_count: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(derive_seed(seed, "means"));
    (0..class_count * dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Gaussian blobs around seeded means. `round(label_noise_rate · n)` labels
/// are resampled uniformly over all classes (a resample may hit the true
/// class).
pub fn gen_gaussian_clusters(params: &ClusterParams, seed: u64) -> Result<LabeledDataset> {
    params.validate()?;
    let means = cluster_means(params.class_count, params.dim, seed);
    sample_clusters(params, &means, derive_seed(seed, "samples"), seed)
}

/// Train and test sets sharing one set of class means. The test set is drawn
/// from a disjoint seed and always has clean labels.
pub fn gen_gaussian_split(
    params: &ClusterParams,
    test_per_class: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    params.validate()?;
    let means = cluster_means(params.class_count, params.dim, seed);
    let train = sample_clusters(params, &means, derive_seed(seed, "data/train"), seed)?;
    let test_params = ClusterParams {
        per_class_count: test_per_class,
        label_noise_rate: 0.0,
        ..params.clone()
    };
    test_params.validate()?;
    let test = sample_clusters(&test_params, &means, derive_seed(seed, "data/test"), seed)?;
    Ok((train, test))
}

/// Fresh inputs from the same cluster distribution, for an independent `D_s`.
pub fn gen_gaussian_unlabeled(params: &ClusterParams, count: usize, seed: u64) -> Result<UnlabeledDataset> {
    params.validate()?;
    let means = cluster_means(params.class_count, params.dim, seed);
    let draw = ClusterParams {
        per_class_count: count.div_ceil(params.class_count).max(1),
        label_noise_rate: 0.0,
        ..params.clone()
    };
    let d = sample_clusters(&draw, &means, derive_seed(seed, "data/student"), seed)?;
    let mut rng = rng_from(derive_seed(seed, "data/student/pick"));
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(count.max(1));
    UnlabeledDataset::new(d.gather(&idx).0, Provenance::IndependentDraw)
}

fn sample_clusters(params: &ClusterParams, means: &[f64], sample_seed: u64, tag: u64) -> Result<LabeledDataset> {
    let (c, d, per) = (params.class_count, params.dim, params.per_class_count);
    let n = c * per;
    let mut rng = rng_from(sample_seed);
    let mut inputs = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for class in 0..c {
        for _ in 0..per {
            for j in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                inputs.push(means[class * d + j] + params.cluster_spread * z);
            }
            labels.push(class);
        }
    }
    let noisy = (params.label_noise_rate * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for &i in &order[..noisy.min(n)] {
        labels[i] = rng.random_range(0..c);
    }
    LabeledDataset::new(Tensor::matrix(n, d, inputs)?, labels, c, tag)
}

/// Interleaved 2-D spiral arms, one per class. Radius runs from 0.1 to 1 and
/// each arm turns 4 radians; isotropic Gaussian noise is added to the points.
pub fn gen_spirals(class_count: usize, points_per_class: usize, noise_std: f64, seed: u64) -> Result<LabeledDataset> {
    if !(2..=3).contains(&class_count) {
        return data_err(format!("spirals support 2 or 3 classes, got {class_count}"));
    }
    if points_per_class == 0 {
        return data_err("points_per_class must be positive");
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return data_err(format!("noise_std must be finite and non-negative, got {noise_std}"));
    }
    let mut rng = rng_from(derive_seed(seed, "spirals"));
    let n = class_count * points_per_class;
    let mut inputs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for class in 0..class_count {
        let offset = std::f64::consts::TAU * class as f64 / class_count as f64;
        for _ in 0..points_per_class {
            let t: f64 = rng.random();
            let r = 0.1 + 0.9 * t;
            let theta = 4.0 * t + offset;
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            inputs.push(r * theta.sin() + noise_std * nx);
            inputs.push(r * theta.cos() + noise_std * ny);
            labels.push(class);
        }
    }
    LabeledDataset::new(Tensor::matrix(n, 2, inputs)?, labels, class_count, seed)
}

/// A first-order Markov chain over token ids with its stationary
/// distribution and entropy rate.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovSource {
    vocab: usize,
    transition: Vec<f64>,
    stationary: Vec<f64>,
    entropy: f64,
}

impl MarkovSource {
    /// Rows drawn from a symmetric Dirichlet with the given concentration.
    /// An infinite concentration gives the uniform chain; a row whose Gamma
    /// draws all underflow becomes one-hot at a seeded position.
    pub fn random(vocab: usize, concentration: f64, seed: u64) -> Result<Self> {
        if vocab < 2 {
            return data_err("vocab_size must be at least 2");
        }
        if !(concentration > 0.0) {
            return data_err(format!("concentration must be positive, got {concentration}"));
        }
        let mut rng = rng_from(derive_seed(seed, "transition"));
        let mut m = vec![0.0; vocab * vocab];
        if concentration.is_infinite() {
            m.iter_mut().for_each(|v| *v = 1.0 / vocab as f64);
        } else {
            let gamma = Gamma::new(concentration, 1.0).map_err(|e| LotError::Data(e.to_string()))?;
            for row in m.chunks_mut(vocab) {
                row.iter_mut().for_each(|v| *v = gamma.sample(&mut rng));
                let total: f64 = row.iter().sum();
                if total > 0.0 && total.is_finite() {
                    row.iter_mut().for_each(|v| *v /= total);
                } else {
                    row.iter_mut().for_each(|v| *v = 0.0);
                    row[rng.random_range(0..vocab)] = 1.0;
                }
            }
        }
        Self::from_matrix(vocab, m)
    }

    pub fn from_matrix(vocab: usize, transition: Vec<f64>) -> Result<Self> {
        if vocab < 2 || transition.len() != vocab * vocab {
            return data_err("transition matrix must be vocab × vocab with vocab ≥ 2");
        }
        for (s, row) in transition.chunks(vocab).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return data_err(format!("row {s} is not a probability distribution"));
            }
        }
        let stationary = stationary_distribution(&transition, vocab);
        let entropy = entropy_rate(&transition, &stationary, vocab);
        Ok(Self { vocab, transition, stationary, entropy })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    /// Optimal per-token cross-entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.entropy
    }

    /// A trajectory whose first token is drawn from the stationary distribution.
    pub fn sample(&self, length: usize, seed: u64) -> Vec<usize> {
        let mut rng = rng_from(seed);
        let mut tokens = Vec::with_capacity(length);
        if length == 0 {
            return tokens;
        }
        let mut s = draw(&self.stationary, rng.random());
        tokens.push(s);
        for _ in 1..length {
            s = draw(&self.transition[s * self.vocab..(s + 1) * self.vocab], rng.random());
            tokens.push(s);
        }
        tokens
    }
}

fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` just below 1; fall back to the last positive entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Power iteration on the lazy chain `(P + I) / 2`, which shares the
/// stationary distribution of `P` but is aperiodic.
pub fn stationary_distribution(transition: &[f64], vocab: usize) -> Vec<f64> {
    let mut pi = vec![1.0 / vocab as f64; vocab];
    let mut next = vec![0.0; vocab];
    for _ in 0..200_000 {
        next.copy_from_slice(&pi);
        next.iter_mut().for_each(|v| *v *= 0.5);
        for s in 0..vocab {
            let w = 0.5 * pi[s];
            if w == 0.0 {
                continue;
            }
            for (n, p) in next.iter_mut().zip(&transition[s * vocab..(s + 1) * vocab]) {
                *n += w * p;
            }
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= total);
        let delta: f64 = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut pi, &mut next);
        if delta < 1e-15 {
            break;
        }
    }
    pi
}

/// `H = -Σ_s π(s) Σ_t P(s,t) ln P(s,t)` with `0 ln 0 = 0`.
pub fn entropy_rate(transition: &[f64], stationary: &[f64], vocab: usize) -> f64 {
    let mut h = 0.0;
    for (s, &w) in stationary.iter().enumerate() {
        let row_h: f64 = transition[s * vocab..(s + 1) * vocab]
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum();
        h += w * row_h;
    }
    h.max(0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextCorpus {
    pub tokens: Vec<usize>,
    pub source: MarkovSource,
    pub seed: u64,
}

impl TextCorpus {
    pub fn vocab_size(&self) -> usize {
        self.source.vocab()
    }

    pub fn entropy(&self) -> f64 {
        self.source.entropy()
    }

    /// Overlapping windows of `seq_len + 1` tokens with stride `seq_len`, so
    /// every token after the first is predicted exactly once.
    pub fn windows(&self, seq_len: usize) -> Vec<Vec<usize>> {
        if seq_len == 0 || self.tokens.len() < 2 {
            return Vec::new();
        }
        let count = (self.tokens.len() - 1) / seq_len;
        (0..count)
            .map(|i| self.tokens[i * seq_len..i * seq_len + seq_len + 1].to_vec())
            .collect()
    }
}

pub fn gen_markov_corpus(vocab_size: usize, length: usize, concentration: f64, seed: u64) -> Result<TextCorpus> {
    if length < 1000 {
        return data_err(format!("corpus length must be at least 1000, got {length}"));
    }
    let source = MarkovSource::random(vocab_size, concentration, seed)?;
    corpus_from_source(&source, length, seed)
}

/// Train and test corpora drawn from one chain with disjoint sampling seeds.
pub fn gen_markov_split(
    vocab_size: usize,
    train_length: usize,
    test_length: usize,
    concentration: f64,
    seed: u64,
) -> Result<(TextCorpus, TextCorpus)> {
    if train_length < 1000 || test_length < 1000 {
        return data_err("corpus lengths must be at least 1000");
    }
    let source = MarkovSource::random(vocab_size, concentration, seed)?;
    let train = corpus_from_source(&source, train_length, derive_seed(seed, "data/train"))?;
    let test = corpus_from_source(&source, test_length, derive_seed(seed, "data/test"))?;
    Ok((train, test))
}

pub fn corpus_from_source(source: &MarkovSource, length: usize, seed: u64) -> Result<TextCorpus> {
    let tokens = source.sample(length, derive_seed(seed, "tokens"));
    Ok(TextCorpus { tokens, source: source.clone(), seed })
}

/// `n` examples drawn uniformly without replacement.
pub fn subset(d: &LabeledDataset, n: usize, seed: u64) -> Result<LabeledDataset> {
    if n == 0 || n > d.len() {
        return data_err(format!("subset of {n} requested from {} examples", d.len()));
    }
    let mut rng = rng_from(derive_seed(seed, "subset"));
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(n);
    let (inputs, labels) = d.gather(&idx);
    Ok(LabeledDataset {
        inputs,
        labels,
        class_count: d.class_count,
        seed: d.seed,
    })
}

/// Index stream over `0..len` in epochs. Each epoch is a permutation seeded by
/// `(seed, epoch)`; the last batch of an epoch may be short.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    perm: Vec<usize>,
}

impl BatchIterator {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch_size == 0 {
            return data_err("batch iterator needs a non-empty source and positive batch size");
        }
        let mut it = Self {
            len,
            batch_size: batch_size.min(len),
            seed,
            epoch: 0,
            cursor: 0,
            perm: Vec::new(),
        };
        it.reshuffle();
        Ok(it)
    }

    fn reshuffle(&mut self) {
        let mut rng = rng_from(derive_seed(self.seed, &format!("epoch/{}", self.epoch)));
        self.perm = (0..self.len).collect();
        self.perm.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor >= self.len {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.len);
        let out = self.perm[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }

    pub fn next_labeled(&mut self, d: &LabeledDataset) -> (Tensor, Vec<usize>) {
        let idx = self.next_indices();
        d.gather(&idx)
    }

    pub fn next_unlabeled(&mut self, d: &UnlabeledDataset) -> Tensor {
        let idx = self.next_indices();
        d.gather(&idx)
    }
}

const DATA_MAGIC: &[u8; 4] = b"LOTD";
const DATA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetFile {
    Labeled(LabeledDataset),
    Unlabeled(UnlabeledDataset),
    Corpus(TextCorpus),
}

/// Layout after the header `LOTD | version u32 | kind u8`:
/// labeled `rows u64, cols u64, classes u64, seed u64, f64 × rows·cols, u32 × rows`;
/// unlabeled `rows u64, cols u64, provenance u8, f64 × rows·cols`;
/// corpus `vocab u64, length u64, seed u64, f64 × vocab², u32 × length`.
pub fn write_dataset<W: Write>(w: &mut W, file: &DatasetFile) -> Result<()> {
    w.write_all(DATA_MAGIC)?;
    w.write_all(&DATA_VERSION.to_le_bytes())?;
    match file {
        DatasetFile::Labeled(d) => {
            w.write_all(&[0])?;
            put_u64(w, d.len() as u64)?;
            put_u64(w, d.dim() as u64)?;
            put_u64(w, d.class_count as u64)?;
            put_u64(w, d.seed)?;
            put_f64s(w, d.inputs.data())?;
            put_u32s(w, &d.labels)?;
        }
        DatasetFile::Unlabeled(d) => {
            w.write_all(&[1])?;
            put_u64(w, d.len() as u64)?;
            put_u64(w, d.dim() as u64)?;
            w.write_all(&[match d.provenance {
                Provenance::IdenticalToTrain => 0,
                Provenance::IndependentDraw => 1,
            }])?;
            put_f64s(w, d.inputs.data())?;
        }
        DatasetFile::Corpus(c) => {
            w.write_all(&[2])?;
            put_u64(w, c.vocab_size() as u64)?;
            put_u64(w, c.tokens.len() as u64)?;
            put_u64(w, c.seed)?;
            put_f64s(w, c.source.transition())?;
            put_u32s(w, &c.tokens)?;
        }
    }
    Ok(())
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<DatasetFile> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATA_MAGIC {
        return Err(LotError::Format("not a LOTD file".into()));
    }
    let version = get_u32(r)?;
    if version != DATA_VERSION {
        return Err(LotError::Format(format!("unsupported LOTD version {version}")));
    }
    let kind = get_u8(r)?;
    match kind {
        0 => {
            let rows = get_len(r)?;
            let cols = get_len(r)?;
            let classes = get_len(r)?;
            let seed = get_u64(r)?;
            let data = get_f64s(r, rows * cols)?;
            let labels = get_u32s(r, rows)?;
            Ok(DatasetFile::Labeled(LabeledDataset::new(
                Tensor::matrix(rows, cols, data)?,
                labels,
                classes,
                seed,
            )?))
        }
        1 => {
            let rows = get_len(r)?;
            let cols = get_len(r)?;
            let provenance = match get_u8(r)? {
                0 => Provenance::IdenticalToTrain,
                1 => Provenance::IndependentDraw,
                p => return Err(LotError::Format(format!("unknown provenance tag {p}"))),
            };
            let data = get_f64s(r, rows * cols)?;
            Ok(DatasetFile::Unlabeled(UnlabeledDataset::new(
                Tensor::matrix(rows, cols, data)?,
                provenance,
            )?))
        }
        2 => {
            let vocab = get_len(r)?;
            let length = get_len(r)?;
            let seed = get_u64(r)?;
            let transition = get_f64s(r, vocab * vocab)?;
            let tokens = get_u32s(r, length)?;
            if tokens.iter().any(|&t| t >= vocab) {
                return Err(LotError::Format("token id out of range".into()));
            }
            let source = MarkovSource::from_matrix(vocab, transition)?;
            Ok(DatasetFile::Corpus(TextCorpus { tokens, source, seed }))
        }
        k => Err(LotError::Format(format!("unknown dataset kind {k}"))),
    }
}

pub(crate) fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn put_f64s<W: Write>(w: &mut W, vs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn put_u32s<W: Write>(w: &mut W, vs: &[usize]) -> Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 4);
    for &v in vs {
        let v = u32::try_from(v).map_err(|_| LotError::Format(format!("value {v} exceeds u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn get_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

pub(crate) fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// A u64 length guarded against absurd values from corrupt headers.
pub(crate) fn get_len<R: Read>(r: &mut R) -> Result<usize> {
    let v = get_u64(r)?;
    if v > (1 << 32) {
        return Err(LotError::Format(format!("length {v} is implausibly large")));
    }
    Ok(v as usize)
}

pub(crate) fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn get_u32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<usize>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect())
}
