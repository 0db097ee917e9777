//! Synthetic multi-city traffic with planted patch motifs.
//!
//! Each city value is `level + scale · (offset + daily + motif + noise)`:
//! a per-node offset, a smooth rush-hour baseline, one motif per node and
//! hour-of-week slot, and white noise. A node uses its own dominant motif in a
//! slot with probability `affinity` and otherwise draws one from the city's
//! mixture, so a day of history says something about the next hour.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::corpus::{City, CityCorpus, Dataset, Role};
use super::{TrafficSeries, HOURS_PER_WEEK};
use crate::error::{Result, TpbError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CityRole {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CitySpec {
    pub id: String,
    pub nodes: usize,
    pub days: usize,
    #[serde(default = "default_role")]
    pub role: CityRole,
    /// Motif mixture weights; uniform when absent.
    #[serde(default)]
    pub mixture: Option<Vec<f64>>,
    /// Days kept for few-shot training when the city is the target; the rest
    /// becomes the test span.
    #[serde(default = "default_few_shot_days")]
    pub few_shot_days: usize,
    #[serde(default)]
    pub start_timestamp: u32,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
}

fn default_role() -> CityRole {
    CityRole::Source
}
fn default_few_shot_days() -> usize {
    2
}
fn default_level() -> f64 {
    60.0
}
fn default_scale() -> f64 {
    10.0
}
fn default_t0() -> usize {
    12
}
fn default_channels() -> usize {
    1
}
fn default_interval() -> u32 {
    5
}
fn default_affinity() -> f64 {
    0.95
}
fn default_k() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    #[serde(default = "default_k")]
    pub planted_pattern_count: usize,
    pub noise_std: f64,
    #[serde(default = "default_t0")]
    pub t0: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_interval")]
    pub interval_minutes: u32,
    #[serde(default = "default_affinity")]
    pub affinity: f64,
    /// Explicit `[K*][T0][C]` motif library; drawn from the seed when absent.
    #[serde(default)]
    pub pattern_library: Option<Vec<Vec<Vec<f64>>>>,
    pub cities: Vec<CitySpec>,
}

impl Default for SynthSpec {
    /// Three 20-node source cities over two weeks and a 20-node target city
    /// with two few-shot days followed by four test days.
    fn default() -> Self {
        let city = |id: &str, role, days, mixture: [f64; 5]| CitySpec {
            id: id.to_string(),
            nodes: 20,
            days,
            role,
            mixture: Some(mixture.to_vec()),
            few_shot_days: 2,
            start_timestamp: 0,
            level: 60.0,
            scale: 10.0,
        };
        Self {
            seed: 0,
            planted_pattern_count: 5,
            noise_std: 0.1,
            t0: 12,
            channels: 1,
            interval_minutes: 5,
            affinity: 0.95,
            pattern_library: None,
            cities: vec![
                city("alpha", CityRole::Source, 14, [0.3, 0.25, 0.2, 0.15, 0.1]),
                city("beta", CityRole::Source, 14, [0.1, 0.3, 0.25, 0.2, 0.15]),
                city("gamma", CityRole::Source, 14, [0.15, 0.1, 0.2, 0.25, 0.3]),
                city("delta", CityRole::Target, 6, [0.2, 0.2, 0.2, 0.2, 0.2]),
            ],
        }
    }
}

/// A generated city together with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticCity {
    pub series: TrafficSeries,
    /// Motif id of every `T0`-step block, `[N, T/T0]`.
    pub labels: Array2<usize>,
    /// Noise- and motif-free part in output units, `[N, T]`.
    pub baseline: Array2<f64>,
    /// Row-normalized Gaussian-kernel graph over node positions.
    pub prior_graph: Array2<f64>,
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| TpbError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.planted_pattern_count;
        if k < 2 {
            return Err(TpbError::Config(format!(
                "planted_pattern_count {k} must be at least 2"
            )));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err(TpbError::Config(format!(
                "noise_std {} must be non-negative",
                self.noise_std
            )));
        }
        if !(0.0..=1.0).contains(&self.affinity) {
            return Err(TpbError::Config(format!("affinity {} outside [0, 1]", self.affinity)));
        }
        if self.t0 == 0 || self.channels == 0 {
            return Err(TpbError::Config("t0 and channels must be positive".into()));
        }
        if self.interval_minutes == 0 || 60 % self.interval_minutes != 0 {
            return Err(TpbError::Config(format!(
                "interval_minutes {} must divide 60",
                self.interval_minutes
            )));
        }
        if let Some(lib) = &self.pattern_library {
            let ok = lib.len() == k
                && lib
                    .iter()
                    .all(|m| m.len() == self.t0 && m.iter().all(|r| r.len() == self.channels));
            if !ok {
                return Err(TpbError::Config(format!(
                    "pattern_library must be {k}×{}×{}",
                    self.t0, self.channels
                )));
            }
        }
        for c in &self.cities {
            if c.nodes == 0 || c.days == 0 {
                return Err(TpbError::Config(format!("city {} needs nodes and days", c.id)));
            }
            if let Some(w) = &c.mixture {
                if w.len() != k
                    || w.iter().any(|&x| x.is_nan() || x < 0.0)
                    || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9
                {
                    return Err(TpbError::Config(format!(
                        "mixture of city {} must hold {k} non-negative weights summing to 1",
                        c.id
                    )));
                }
            }
            if c.role == CityRole::Target && c.few_shot_days >= c.days {
                return Err(TpbError::Config(format!(
                    "target city {} needs more days than its few-shot span",
                    c.id
                )));
            }
        }
        let sources = self.cities.iter().filter(|c| c.role == CityRole::Source).count();
        let targets = self.cities.iter().filter(|c| c.role == CityRole::Target).count();
        if sources == 0 || targets > 1 {
            return Err(TpbError::Config(
                "need at least one source city and at most one target city".into(),
            ));
        }
        let mut ids: Vec<&str> = self.cities.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(TpbError::Config("city ids must be unique".into()));
        }
        Ok(())
    }

    /// The `[K*, T0, C]` motif library, each motif zero-mean with unit RMS.
    pub fn motifs(&self) -> Array3<f64> {
        let (k, t0, c) = (self.planted_pattern_count, self.t0, self.channels);
        if let Some(lib) = &self.pattern_library {
            return Array3::from_shape_fn((k, t0, c), |(i, t, ch)| lib[i][t][ch]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(0);
        let mut out = Array3::zeros((k, t0, c));
        let mut accepted: Vec<Vec<f64>> = Vec::new();
        let mut attempts = 0;
        while accepted.len() < k {
            let cand = random_motif(t0 * c, &mut rng);
            attempts += 1;
            // Keep motifs well apart in angle so they form separable clusters;
            // the bound loosens if a library is hard to fill.
            let limit = if attempts < 2000 { 0.3 } else { 0.9 };
            if accepted.iter().all(|m| cosine(m, &cand).abs() < limit) {
                accepted.push(cand);
            }
        }
        for (i, m) in accepted.iter().enumerate() {
            for (j, &v) in m.iter().enumerate() {
                out[[i, j / c, j % c]] = v;
            }
        }
        out
    }

    pub fn city(&self, id: &str) -> Result<&CitySpec> {
        self.cities
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| TpbError::UnknownCity(id.to_string()))
    }
}

fn random_motif<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let parts = rng.random_range(1..=3);
    let mut m = vec![0.0; len];
    for _ in 0..parts {
        let freq = rng.random_range(1..=3) as f64;
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = rng.random_range(0.5..1.5);
        for (t, v) in m.iter_mut().enumerate() {
            *v += amp * (2.0 * PI * freq * t as f64 / len as f64 + phase).sin();
        }
    }
    let mean = m.iter().sum::<f64>() / len as f64;
    let rms = (m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64).sqrt();
    m.iter().map(|v| (v - mean) / rms.max(1e-9)).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// Rush-hour dips in the morning and evening, damped on weekends.
fn daily_profile(minute_of_week: f64) -> f64 {
    let day = (minute_of_week / 1440.0).floor();
    let hour = (minute_of_week - day * 1440.0) / 60.0;
    let bump = |c: f64, w: f64| (-0.5 * ((hour - c) / w).powi(2)).exp();
    let weekend = if day >= 5.0 { 0.4 } else { 1.0 };
    -weekend * (bump(8.0, 1.5) + 0.8 * bump(17.5, 2.0))
}

/// Generate one city of the spec.
pub fn generate_synthetic_city(spec: &SynthSpec, city_id: &str) -> Result<SyntheticCity> {
    spec.validate()?;
    let index = spec
        .cities
        .iter()
        .position(|c| c.id == city_id)
        .ok_or_else(|| TpbError::UnknownCity(city_id.to_string()))?;
    let city = &spec.cities[index];
    let motifs = spec.motifs();
    let k = spec.planted_pattern_count;
    let (t0, c) = (spec.t0, spec.channels);
    let n = city.nodes;
    let steps = city.days * 24 * 60 / spec.interval_minutes as usize;
    let blocks = steps.div_ceil(t0);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let uniform_mix = vec![1.0 / k as f64; k];
    let mixture = WeightedIndex::new(city.mixture.as_ref().unwrap_or(&uniform_mix))
        .map_err(|e| TpbError::Config(format!("mixture of city {city_id}: {e}")))?;

    let pos: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
    let offsets: Vec<f64> = {
        let d = Normal::new(0.0, 0.2).expect("valid normal");
        (0..n).map(|_| d.sample(&mut rng)).collect()
    };
    let amps: Vec<f64> = {
        let d = Uniform::new(0.4, 0.8).expect("valid range");
        (0..n).map(|_| d.sample(&mut rng)).collect()
    };
    let dominant: Vec<usize> = (0..n).map(|_| mixture.sample(&mut rng)).collect();
    let slot_motif = Array2::from_shape_fn((n, HOURS_PER_WEEK), |(node, _)| {
        if rng.random::<f64>() < spec.affinity {
            dominant[node]
        } else {
            mixture.sample(&mut rng)
        }
    });

    let hour_of = |step: usize| {
        let m = city.start_timestamp as usize + step * spec.interval_minutes as usize;
        (m / 60) % HOURS_PER_WEEK
    };
    let labels = Array2::from_shape_fn((n, blocks), |(node, b)| slot_motif[[node, hour_of(b * t0)]]);
    let baseline = Array2::from_shape_fn((n, steps), |(node, t)| {
        let minute = (city.start_timestamp as usize + t * spec.interval_minutes as usize) % (7 * 1440);
        city.level + city.scale * (offsets[node] + amps[node] * daily_profile(minute as f64))
    });

    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("valid normal");
    let mut values = Array3::<f32>::zeros((n, steps, c));
    for node in 0..n {
        for t in 0..steps {
            let m = labels[[node, t / t0]];
            for ch in 0..c {
                let eps = if spec.noise_std > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                let v = baseline[[node, t]] + city.scale * (motifs[[m, t % t0, ch]] + eps);
                values[[node, t, ch]] = v as f32;
            }
        }
    }

    let series = TrafficSeries::new(city.id.clone(), spec.interval_minutes, city.start_timestamp, values)?;
    Ok(SyntheticCity {
        series,
        labels,
        baseline,
        prior_graph: gaussian_graph(&pos, 0.2),
    })
}

fn gaussian_graph(pos: &[(f64, f64)], sigma: f64) -> Array2<f64> {
    let n = pos.len();
    let mut a = Array2::from_shape_fn((n, n), |(i, j)| {
        let d2 = (pos[i].0 - pos[j].0).powi(2) + (pos[i].1 - pos[j].1).powi(2);
        let w = (-d2 / (2.0 * sigma * sigma)).exp();
        if w < 0.05 {
            0.0
        } else {
            w
        }
    });
    for mut row in a.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    a
}

/// Source corpus, few-shot target and test spans, plus planted block labels
/// of the source cities.
pub struct GeneratedData {
    pub dataset: Dataset,
    pub source_labels: Vec<Array2<usize>>,
}

pub fn generate_dataset(spec: &SynthSpec) -> Result<GeneratedData> {
    spec.validate()?;
    let mut source = Vec::new();
    let mut source_labels = Vec::new();
    let mut target = None;
    for cs in &spec.cities {
        let g = generate_synthetic_city(spec, &cs.id)?;
        match cs.role {
            CityRole::Source => {
                source.push(City {
                    series: g.series,
                    prior_graph: Some(g.prior_graph),
                });
                source_labels.push(g.labels);
            }
            CityRole::Target => {
                let cut = cs.few_shot_days * g.series.steps_per_day();
                let few = g.series.slice_steps(0, cut)?;
                let rest = g.series.slice_steps(cut, g.series.step_count())?;
                target = Some((few, rest, g.prior_graph));
            }
        }
    }
    let (few, rest, graph) = target.ok_or_else(|| TpbError::Config("the spec has no target city".into()))?;
    Ok(GeneratedData {
        dataset: Dataset {
            source: CityCorpus::new(Role::Source, source)?,
            target: CityCorpus::new(
                Role::Target,
                vec![City {
                    series: few,
                    prior_graph: Some(graph.clone()),
                }],
            )?,
            test: CityCorpus::new(
                Role::Test,
                vec![City {
                    series: rest,
                    prior_graph: Some(graph),
                }],
            )?,
        },
        source_labels,
    })
}
