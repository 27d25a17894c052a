//! Data generators for median estimation and class counting, and the
//! power-sum embedding behind the universality construction.

use nalgebra::DMatrix;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Imaginary part and range slack tolerated when inverting power sums.
pub const INVERT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Value(f64),
    /// Zero-based class index.
    Class(usize),
}

impl Target {
    pub fn value(&self) -> f64 {
        match self {
            Target::Value(v) => *v,
            Target::Class(c) => *c as f64,
        }
    }
}

/// One set with its label. `set` is `[N, d_x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub set: Tensor,
    pub target: Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MedianFamily {
    Uniform,
    /// Gamma with shape 0.5 and scale 0.2.
    Gamma,
    /// Normal with mean 0.5 and standard deviation 0.4.
    Normal,
    /// Every value equal to the constant.
    Constant(f64),
}

impl MedianFamily {
    fn draw<R: Rng + ?Sized>(self, rng: &mut R, n: usize) -> Vec<f64> {
        match self {
            MedianFamily::Uniform => (0..n).map(|_| rng.random::<f64>()).collect(),
            MedianFamily::Gamma => {
                let d = Gamma::new(0.5, 0.2).expect("valid gamma");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            MedianFamily::Normal => {
                let d = Normal::new(0.5, 0.4).expect("valid normal");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            MedianFamily::Constant(c) => vec![c; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianTaskConfig {
    pub set_size: usize,
    pub families: Vec<MedianFamily>,
}

impl Default for MedianTaskConfig {
    fn default() -> Self {
        Self {
            set_size: 100,
            families: vec![
                MedianFamily::Uniform,
                MedianFamily::Gamma,
                MedianFamily::Normal,
            ],
        }
    }
}

/// Median of a non-empty slice; the mean of the two central order
/// statistics when the length is even.
pub fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn gen_median_batch<R: Rng + ?Sized>(
    rng: &mut R,
    batch_size: usize,
    config: &MedianTaskConfig,
) -> Vec<TaskSample> {
    (0..batch_size)
        .map(|_| {
            let family = *config.families.choose(rng).expect("at least one family");
            let values = family.draw(rng, config.set_size);
            let label = median(&values);
            TaskSample {
                set: Tensor::new(&[config.set_size, 1], values),
                target: Target::Value(label),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCountTaskConfig {
    pub set_size: usize,
    pub max_classes: usize,
    pub dim: usize,
    pub noise: f64,
}

impl Default for ClassCountTaskConfig {
    fn default() -> Self {
        Self {
            set_size: 16,
            max_classes: 10,
            dim: 8,
            noise: 0.05,
        }
    }
}

/// Sets of noisy copies of `k` random prototypes, labelled with class index `k - 1`.
pub fn gen_classcount_batch<R: Rng + ?Sized>(
    rng: &mut R,
    batch_size: usize,
    config: &ClassCountTaskConfig,
) -> Vec<TaskSample> {
    assert!(config.max_classes <= config.set_size && config.max_classes >= 1);
    let noise = Normal::new(0.0, config.noise).expect("valid noise scale");
    (0..batch_size)
        .map(|_| {
            let k = rng.random_range(1..=config.max_classes);
            let mut protos: Vec<Vec<f64>> = Vec::with_capacity(k);
            while protos.len() < k {
                let p: Vec<f64> = (0..config.dim)
                    .map(|_| rng.random_range(-1.0..=1.0))
                    .collect();
                if !protos.contains(&p) {
                    protos.push(p);
                }
            }
            let mut slots: Vec<usize> = (0..k).collect();
            slots.extend((k..config.set_size).map(|_| rng.random_range(0..k)));
            slots.shuffle(rng);
            let mut data = Vec::with_capacity(config.set_size * config.dim);
            for &c in &slots {
                data.extend(protos[c].iter().map(|v| v + noise.sample(rng)));
            }
            TaskSample {
                set: Tensor::new(&[config.set_size, config.dim], data),
                target: Target::Class(k - 1),
            }
        })
        .collect()
}

/// Smoke-test regression: the target is `slope · mean(x) + intercept` for
/// scalar elements drawn uniformly from `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearTaskConfig {
    pub set_size: usize,
    pub slope: f64,
    pub intercept: f64,
}

impl Default for LinearTaskConfig {
    fn default() -> Self {
        Self {
            set_size: 10,
            slope: 2.0,
            intercept: -0.5,
        }
    }
}

pub fn gen_linear_batch<R: Rng + ?Sized>(
    rng: &mut R,
    batch_size: usize,
    config: &LinearTaskConfig,
) -> Vec<TaskSample> {
    (0..batch_size)
        .map(|_| {
            let values: Vec<f64> = (0..config.set_size).map(|_| rng.random::<f64>()).collect();
            let mean = values.iter().sum::<f64>() / config.set_size as f64;
            TaskSample {
                set: Tensor::new(&[config.set_size, 1], values),
                target: Target::Value(config.slope * mean + config.intercept),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Task {
    Median(MedianTaskConfig),
    ClassCount(ClassCountTaskConfig),
    Linear(LinearTaskConfig),
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Median(_) => "median",
            Task::ClassCount(_) => "classcount",
            Task::Linear(_) => "linear",
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Task::Median(_) | Task::Linear(_) => 1,
            Task::ClassCount(c) => c.dim,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self {
            Task::Median(_) | Task::Linear(_) => None,
            Task::ClassCount(c) => Some(c.max_classes),
        }
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R, batch_size: usize) -> Vec<TaskSample> {
        match self {
            Task::Median(c) => gen_median_batch(rng, batch_size, c),
            Task::ClassCount(c) => gen_classcount_batch(rng, batch_size, c),
            Task::Linear(c) => gen_linear_batch(rng, batch_size, c),
        }
    }
}

/// `(Σxᵢ, Σxᵢ², …, Σxᵢᴺ)` for `N = |x|`.
pub fn power_sum_forward(x: &[f64]) -> Result<Vec<f64>> {
    if let Some(v) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!(
            "power-sum input {v} is outside [0, 1]"
        )));
    }
    let n = x.len();
    let mut y = vec![0.0; n];
    for &v in x {
        let mut p = 1.0;
        for yk in y.iter_mut() {
            p *= v;
            *yk += p;
        }
    }
    Ok(y)
}

/// Elementary symmetric polynomials `e₀ = 1, e₁, …, e_N` from power sums via
/// Newton's identities.
pub fn elementary_from_power_sums(p: &[f64]) -> Vec<f64> {
    let n = p.len();
    let mut e = vec![0.0; n + 1];
    e[0] = 1.0;
    for k in 1..=n {
        let mut acc = 0.0;
        for i in 1..=k {
            let sign = if i % 2 == 1 { 1.0 } else { -1.0 };
            acc += sign * e[k - i] * p[i - 1];
        }
        e[k] = acc / k as f64;
    }
    e
}

/// Recovers the sorted multiset whose power sums are `y`.
pub fn power_sum_invert(y: &[f64]) -> Result<Vec<f64>> {
    let n = y.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotInImage("non-finite power sum".into()));
    }
    let e = elementary_from_power_sums(y);
    // Monic coefficients, highest degree first: tᴺ - e₁tᴺ⁻¹ + e₂tᴺ⁻² - …
    let coef: Vec<f64> = (0..=n)
        .map(|k| if k % 2 == 0 { e[k] } else { -e[k] })
        .collect();
    let mut companion = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        companion[(0, j)] = -coef[j + 1];
    }
    for i in 1..n {
        companion[(i, i - 1)] = 1.0;
    }
    let eig = companion.complex_eigenvalues();
    let mut roots = Vec::with_capacity(n);
    for z in eig.iter() {
        if z.im.abs() >= INVERT_TOL {
            return Err(Error::NotInImage(format!(
                "complex root {} + {}i",
                z.re, z.im
            )));
        }
        roots.push(newton_polish(&coef, z.re));
    }
    roots.sort_by(f64::total_cmp);
    if let Some(r) = roots
        .iter()
        .find(|r| **r < -INVERT_TOL || **r > 1.0 + INVERT_TOL)
    {
        return Err(Error::NotInImage(format!("root {r} is outside [0, 1]")));
    }
    Ok(roots)
}

fn newton_polish(coef: &[f64], mut t: f64) -> f64 {
    for _ in 0..20 {
        let (mut p, mut dp) = (0.0, 0.0);
        for &c in coef {
            dp = dp * t + p;
            p = p * t + c;
        }
        if dp == 0.0 || !p.is_finite() {
            break;
        }
        let next = t - p / dp;
        if !next.is_finite() || (next - t).abs() <= 1e-16 * t.abs().max(1.0) {
            return if next.is_finite() { next } else { t };
        }
        // Near multiple roots Newton can wander; keep the step only if it
        // does not increase the residual.
        let pn = coef.iter().fold(0.0, |acc, &c| acc * next + c);
        if pn.abs() > p.abs() {
            break;
        }
        t = next;
    }
    t
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn median_labels_match_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in gen_median_batch(&mut rng, 50, &MedianTaskConfig::default()) {
            let mut v = s.set.data().to_vec();
            assert_eq!(v.len(), 100);
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(s.target.value(), (v[49] + v[50]) / 2.0);
        }
    }

    #[test]
    fn constant_family_labels_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = MedianTaskConfig {
            set_size: 7,
            families: vec![MedianFamily::Constant(0.3)],
        };
        for s in gen_median_batch(&mut rng, 5, &cfg) {
            assert_eq!(s.target, Target::Value(0.3));
        }
    }

    #[test]
    fn uniform_labels_concentrate_at_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = MedianTaskConfig {
            set_size: 100,
            families: vec![MedianFamily::Uniform],
        };
        let batch = gen_median_batch(&mut rng, 20_000, &cfg);
        let mean = batch.iter().map(|s| s.target.value()).sum::<f64>() / batch.len() as f64;
        assert!((mean - 0.5).abs() < 0.01);
    }

    #[test]
    fn median_generation_is_deterministic() {
        let a = gen_median_batch(
            &mut ChaCha8Rng::seed_from_u64(4),
            3,
            &MedianTaskConfig::default(),
        );
        let b = gen_median_batch(
            &mut ChaCha8Rng::seed_from_u64(4),
            3,
            &MedianTaskConfig::default(),
        );
        assert_eq!(a, b);
    }

    fn distinct_rows(t: &Tensor) -> usize {
        let mut rows: Vec<Vec<f64>> = (0..t.rows()).map(|i| t.row(i).to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.dedup();
        rows.len()
    }

    #[test]
    fn classcount_without_noise_has_label_many_distinct_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = ClassCountTaskConfig {
            noise: 0.0,
            ..Default::default()
        };
        let mut seen = [false; 10];
        for s in gen_classcount_batch(&mut rng, 300, &cfg) {
            let Target::Class(c) = s.target else { panic!() };
            assert_eq!(s.set.shape(), &[16, 8]);
            assert_eq!(distinct_rows(&s.set), c + 1);
            seen[c] = true;
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn power_sum_examples() {
        assert_eq!(power_sum_forward(&[0.5, 0.5]).unwrap(), vec![1.0, 0.5]);
        let y = power_sum_forward(&[0.2, 0.5]).unwrap();
        assert!((y[0] - 0.7).abs() < 1e-15 && (y[1] - 0.29).abs() < 1e-15);
        assert_eq!(power_sum_forward(&[0.0; 4]).unwrap(), vec![0.0; 4]);
        assert!(matches!(power_sum_forward(&[1.2]), Err(Error::Domain(_))));
    }

    #[test]
    fn newton_identities_example() {
        let e = elementary_from_power_sums(&[0.7, 0.29]);
        assert!((e[1] - 0.7).abs() < 1e-15);
        assert!((e[2] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn invert_examples() {
        let x = power_sum_invert(&[0.7, 0.29]).unwrap();
        assert!((x[0] - 0.2).abs() < 1e-12 && (x[1] - 0.5).abs() < 1e-12);
        let x = power_sum_invert(&[1.0, 0.5]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-7 && (x[1] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn invert_rejects_points_outside_the_image() {
        // p₁ = 0, p₂ = 1 would need roots ±1/√2.
        assert!(matches!(
            power_sum_invert(&[0.0, 1.0]),
            Err(Error::NotInImage(_))
        ));
        // p₂ > p₁² / 1 forces a complex pair.
        assert!(matches!(
            power_sum_invert(&[1.0, 0.2]),
            Err(Error::NotInImage(_))
        ));
    }

    #[test]
    fn round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let n = rng.random_range(1..=5);
            let mut x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            x.sort_by(f64::total_cmp);
            let r = power_sum_invert(&power_sum_forward(&x).unwrap()).unwrap();
            for (a, b) in x.iter().zip(&r) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst < 1e-6, "{worst}");
    }
}
