//! Synthetic epidemic panels: a stochastic SEIR process per county with a
//! wastewater shedding channel that leads reported cases by a configurable
//! reporting delay. Used as the ground-truth oracle for model-level tests;
//! emitted in the exact raw schemas the ingestion pipeline expects.

// float math via the trait: test builds link std, the lib build must not
#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng as _;
use rand_distr::{Binomial, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::{rng_from_seed, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub counties: usize,
    pub days: usize,
    pub population: u64,
    pub initial_infected: u64,
    /// Transmission rate at containment 0 / 100.
    pub beta_max: f64,
    pub beta_min: f64,
    /// E -> I rate (1 / incubation days).
    pub incubation_rate: f64,
    /// I -> R rate (1 / infectious days).
    pub recovery_rate: f64,
    /// Days between infection and case report.
    pub reporting_delay: usize,
    /// Fraction of infections that become reported cases.
    pub reporting_fraction: f64,
    /// Log-normal-shaped shedding kernel over days since infection;
    /// length 1 means instantaneous shedding.
    pub shedding_len: usize,
    pub shedding_mu: f64,
    pub shedding_sigma: f64,
    /// Multiplicative observation noise (standard deviations).
    pub case_noise: f64,
    pub viral_noise: f64,
    /// Wastewater sampling period in days (weekly by default).
    pub viral_sample_period: usize,
    /// Containment schedule levels are drawn from this range.
    pub containment_range: (f64, f64),
    /// Mean daily imported infections; keeps series from dying out.
    pub import_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            counties: 10,
            days: 240,
            population: 100_000,
            initial_infected: 50,
            beta_max: 0.45,
            beta_min: 0.08,
            incubation_rate: 1.0 / 3.0,
            recovery_rate: 1.0 / 5.0,
            reporting_delay: 7,
            reporting_fraction: 0.5,
            shedding_len: 3,
            shedding_mu: 0.0,
            shedding_sigma: 0.8,
            case_noise: 0.05,
            viral_noise: 0.1,
            viral_sample_period: 7,
            containment_range: (0.0, 90.0),
            import_rate: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.counties == 0 || self.days < 30 || self.population == 0 {
            return Err(CoreError::InvalidConfig {
                what: "need at least one county, 30 days, and a positive population".into(),
            });
        }
        if self.beta_max <= 0.0
            || self.beta_min < 0.0
            || self.beta_min > self.beta_max
            || self.incubation_rate <= 0.0
            || self.recovery_rate <= 0.0
        {
            return Err(CoreError::InvalidConfig {
                what: "epidemic rates must be positive with beta_min <= beta_max".into(),
            });
        }
        if self.reporting_delay == 0 || self.reporting_delay >= self.days {
            return Err(CoreError::InvalidConfig {
                what: format!("reporting delay {} outside 1..days", self.reporting_delay),
            });
        }
        if !(0.0 < self.reporting_fraction && self.reporting_fraction <= 1.0) {
            return Err(CoreError::InvalidConfig {
                what: format!("reporting fraction {} outside (0, 1]", self.reporting_fraction),
            });
        }
        if self.shedding_len == 0 || self.viral_sample_period == 0 {
            return Err(CoreError::InvalidConfig {
                what: "shedding kernel and sampling period must be nonempty".into(),
            });
        }
        if self.case_noise < 0.0 || self.viral_noise < 0.0 || self.import_rate < 0.0 {
            return Err(CoreError::InvalidConfig {
                what: "noise levels and import rate must be nonnegative".into(),
            });
        }
        let (lo, hi) = self.containment_range;
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo > hi {
            return Err(CoreError::InvalidConfig {
                what: format!("containment range ({lo}, {hi}) outside [0, 100]"),
            });
        }
        Ok(())
    }

    /// Normalized log-normal-shaped shedding weights over days 0..len.
    pub fn shedding_kernel(&self) -> Vec<f64> {
        if self.shedding_len == 1 {
            return vec![1.0];
        }
        let mut w: Vec<f64> = (0..self.shedding_len)
            .map(|j| {
                let x = (j + 1) as f64;
                let z = (x.ln() - self.shedding_mu) / self.shedding_sigma;
                (-0.5 * z * z).exp() / x
            })
            .collect();
        let total: f64 = w.iter().sum();
        for v in &mut w {
            *v /= total;
        }
        w
    }
}

/// Per-county synthetic truth and observables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthCounty {
    pub county_id: String,
    pub region_id: String,
    /// Cumulative reported cases per 100k, daily.
    pub cumulative_cases_per_100k: Vec<f64>,
    /// Sparse wastewater samples: (day index, concentration).
    pub viral_samples: Vec<(usize, f64)>,
    /// Daily policy indices: government response, containment and health,
    /// stringency, economic support. All in [0, 100].
    pub oxford: [Vec<f64>; 4],
    /// Latent daily new infections.
    pub incidence: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthOutput {
    pub config: SynthConfig,
    pub counties: Vec<SynthCounty>,
}

fn binomial(rng: &mut Rng, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("validated p").sample(rng)
}

/// Piecewise-constant containment schedule with 30-60 day segments.
fn containment_schedule(days: usize, range: (f64, f64), rng: &mut Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(days);
    while out.len() < days {
        let span = rng.random_range(30..=60usize);
        let level = if range.0 == range.1 {
            range.0
        } else {
            rng.random_range(range.0..=range.1)
        };
        for _ in 0..span {
            if out.len() == days {
                break;
            }
            out.push(level);
        }
    }
    out
}

fn simulate_county(config: &SynthConfig, index: usize) -> Result<SynthCounty> {
    // per-county stream so counties are independent of generation order
    let mut rng = rng_from_seed(
        config
            .seed
            .wrapping_add((index as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15)),
    );
    let days = config.days;
    let n = config.population;
    let containment = containment_schedule(days, config.containment_range, &mut rng);

    let mut s = n - config.initial_infected.min(n);
    let mut e: u64 = 0;
    let mut i = config.initial_infected.min(n);
    let mut r: u64 = 0;
    let p_incubate = 1.0 - (-config.incubation_rate).exp();
    let p_recover = 1.0 - (-config.recovery_rate).exp();
    let import_dist = if config.import_rate > 0.0 {
        Some(Poisson::new(config.import_rate).expect("positive rate"))
    } else {
        None
    };

    let mut incidence = Vec::with_capacity(days);
    for day in 0..days {
        let beta = config.beta_max
            - (config.beta_max - config.beta_min) * containment[day] / 100.0;
        let force = beta * i as f64 / n as f64;
        let p_infect = 1.0 - (-force).exp();
        let mut new_e = binomial(&mut rng, s, p_infect);
        if let Some(dist) = &import_dist {
            let imports = (dist.sample(&mut rng) as u64).min(s - new_e.min(s));
            new_e += imports;
        }
        let new_i = binomial(&mut rng, e, p_incubate);
        let new_r = binomial(&mut rng, i, p_recover);
        s -= new_e;
        e = e + new_e - new_i;
        i = i + new_i - new_r;
        r += new_r;
        if s + e + i + r != n {
            return Err(CoreError::InvalidArgument {
                what: format!("compartment conservation violated on day {day}"),
            });
        }
        incidence.push(new_e as f64);
    }

    let per_100k = 1e5 / n as f64;
    let noise = |rng: &mut Rng, sd: f64| -> f64 {
        if sd == 0.0 {
            1.0
        } else {
            (1.0 + Normal::new(0.0, sd).expect("sd >= 0").sample(rng)).max(0.0)
        }
    };

    // reported cases: delayed, thinned, noisy; accumulated to cumulative form
    let mut cumulative = Vec::with_capacity(days);
    let mut total = 0.0;
    for day in 0..days {
        let latent = if day >= config.reporting_delay {
            incidence[day - config.reporting_delay]
        } else {
            0.0
        };
        let reported = config.reporting_fraction * latent * noise(&mut rng, config.case_noise);
        total += reported * per_100k;
        cumulative.push(total);
    }

    // wastewater: shedding-kernel convolution of incidence, sampled sparsely
    let kernel = config.shedding_kernel();
    let viral_daily: Vec<f64> = (0..days)
        .map(|t| {
            kernel
                .iter()
                .enumerate()
                .filter(|(j, _)| *j <= t)
                .map(|(j, w)| w * incidence[t - j])
                .sum::<f64>()
                * per_100k
        })
        .collect();
    let viral_samples: Vec<(usize, f64)> = (0..days)
        .step_by(config.viral_sample_period)
        .map(|t| (t, viral_daily[t] * noise(&mut rng, config.viral_noise)))
        .collect();

    // policy indices; containment-and-health is the transmission driver
    let containment_health = containment.clone();
    let mut gov_response = Vec::with_capacity(days);
    for t in 0..days {
        let lo = t.saturating_sub(6);
        let window = &containment[lo..=t];
        gov_response.push(window.iter().sum::<f64>() / window.len() as f64);
    }
    let stringency: Vec<f64> = containment
        .iter()
        .enumerate()
        .map(|(t, &c)| (c + 5.0 * (t as f64 / 30.0).sin()).clamp(0.0, 100.0))
        .collect();
    let mut economic = Vec::with_capacity(days);
    let mut level: f64 = rng.random_range(20.0..80.0);
    for _ in 0..days {
        level = (level + rng.random_range(-1.5..1.5)).clamp(0.0, 100.0);
        economic.push(level);
    }

    Ok(SynthCounty {
        county_id: format!("county{index:02}"),
        region_id: format!("region{index:02}"),
        cumulative_cases_per_100k: cumulative,
        viral_samples,
        oxford: [gov_response, containment_health, stringency, economic],
        incidence,
    })
}

/// Generate the full multi-county bundle. Pure function of the config.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let counties = (0..config.counties)
        .map(|i| simulate_county(config, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthOutput {
        config: config.clone(),
        counties,
    })
}

/// Lag (in days) maximizing the cross-correlation of `lead` against `follow`
/// shifted by that lag. Used to verify the wastewater lead property.
pub fn cross_correlation_argmax(lead: &[f64], follow: &[f64], max_lag: usize) -> usize {
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (ml, mf) = (mean(lead), mean(follow));
    let mut best = (0usize, f64::NEG_INFINITY);
    for lag in 0..=max_lag {
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for t in 0..lead.len().saturating_sub(lag) {
            let a = lead[t] - ml;
            let b = follow[t + lag] - mf;
            num += a * b;
            da += a * a;
            db += b * b;
        }
        let denom = (da * db).sqrt();
        let c = if denom > 0.0 { num / denom } else { 0.0 };
        if c > best.1 {
            best = (lag, c);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn deterministic_config() -> SynthConfig {
        SynthConfig {
            counties: 1,
            days: 120,
            reporting_delay: 3,
            reporting_fraction: 1.0,
            shedding_len: 1,
            case_noise: 0.0,
            viral_noise: 0.0,
            viral_sample_period: 1,
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_limit_recovers_the_configured_lag() {
        let out = generate(&deterministic_config()).unwrap();
        let county = &out.counties[0];
        // daily reported cases by day: day 0 is the first cumulative value
        let cum = &county.cumulative_cases_per_100k;
        let mut daily = vec![cum[0]];
        daily.extend(cum.windows(2).map(|w| w[1] - w[0]));
        let viral: Vec<f64> = county.viral_samples.iter().map(|(_, v)| *v).collect();
        let lag = cross_correlation_argmax(&viral, &daily, 10);
        assert_eq!(lag, 3);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SynthConfig {
            counties: 3,
            days: 90,
            seed: 42,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        for (ca, cb) in a.counties.iter().zip(&b.counties) {
            assert_eq!(ca.cumulative_cases_per_100k, cb.cumulative_cases_per_100k);
            assert_eq!(ca.viral_samples, cb.viral_samples);
            assert_eq!(ca.incidence, cb.incidence);
        }
    }

    #[test]
    fn different_seeds_differ() {
        let mut cfg = SynthConfig {
            counties: 1,
            days: 90,
            ..SynthConfig::default()
        };
        cfg.seed = 1;
        let a = generate(&cfg).unwrap();
        cfg.seed = 2;
        let b = generate(&cfg).unwrap();
        assert_ne!(
            a.counties[0].cumulative_cases_per_100k,
            b.counties[0].cumulative_cases_per_100k
        );
    }

    #[test]
    fn containment_suppresses_growth() {
        // paired seeds: open (containment 0) vs strict (containment 85)
        for seed in [1u64, 2, 3, 4, 5] {
            let open = SynthConfig {
                counties: 1,
                days: 120,
                containment_range: (0.0, 0.0),
                seed,
                ..SynthConfig::default()
            };
            let strict = SynthConfig {
                containment_range: (85.0, 85.0),
                ..open.clone()
            };
            let total = |cfg: &SynthConfig| -> f64 {
                generate(cfg).unwrap().counties[0].incidence.iter().sum()
            };
            assert!(
                total(&open) > total(&strict),
                "seed {seed}: strict containment should lower total incidence"
            );
        }
    }

    #[test]
    fn cumulative_cases_are_monotone_nonnegative() {
        let out = generate(&SynthConfig {
            counties: 2,
            days: 90,
            seed: 7,
            ..SynthConfig::default()
        })
        .unwrap();
        for c in &out.counties {
            assert!(c.cumulative_cases_per_100k.windows(2).all(|w| w[1] >= w[0]));
            assert!(c.cumulative_cases_per_100k[0] >= 0.0);
            for series in &c.oxford {
                assert!(series.iter().all(|&v| (0.0..=100.0).contains(&v)));
            }
        }
    }

    #[test]
    fn shedding_kernel_normalizes() {
        let cfg = SynthConfig {
            shedding_len: 8,
            ..SynthConfig::default()
        };
        let k = cfg.shedding_kernel();
        assert_eq!(k.len(), 8);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(k.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn weekly_sampling_emits_sparse_points() {
        let out = generate(&SynthConfig {
            counties: 1,
            days: 70,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        let samples = &out.counties[0].viral_samples;
        assert_eq!(samples.len(), 10); // days 0, 7, ..., 63
        assert!(samples.windows(2).all(|w| w[1].0 - w[0].0 == 7));
    }
}
