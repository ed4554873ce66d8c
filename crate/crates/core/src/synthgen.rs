//! Synthetic longitudinal cohorts with planted, oracle-computable signal.
//!
//! Each patient gets a visit count and per-visit code counts from rounded,
//! truncated normals calibrated so the discrete moments hit the configured
//! means and standard deviations. Visits mix persistent chronic codes, drawn
//! from the head of the common pool, with acute draws from the rest of a
//! Zipf-weighted common pool and a flat rare pool.
//! Planted rules fire a target after an ordered precursor pair, so the Bayes
//! posterior of every label is known exactly.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::corpus::{Demographics, PatientRecord, Sex, Visit};
use crate::error::{Error, Result};
use crate::metrics;
use crate::rng::{self, Rng};

/// Common codes named after real ICD-10 diagnoses; the rest of the common
/// pool gets synthetic names.
pub const NAMED_COMMON: [&str; 10] = [
    "F43.12", "E11.9", "E78.5", "M54.5", "M54.50", "G47.33", "F33.9", "J44.9", "K21.9", "I25.10",
];
pub const NAMED_RARE: [&str; 10] = [
    "D21.0", "D46.4", "D22.6", "D23.10", "L02.41", "M86.27", "I61.1", "C25.0", "T86.19", "H35.31",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    /// The target is emitted as a code at a later visit.
    NextVisitCode,
    /// The target is a patient-level label that never enters the history.
    BinaryOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRule {
    pub name: String,
    /// Fires when `precursors.0` occurs in a strictly earlier visit than
    /// `precursors.1`.
    pub precursors: (String, String),
    pub target: String,
    #[serde(default = "default_hit")]
    pub hit_prob: f64,
    #[serde(default = "default_base")]
    pub base_prob: f64,
    pub kind: RuleKind,
    /// Fraction of patients who receive both precursors.
    #[serde(default = "default_precursor_rate")]
    pub precursor_rate: f64,
    /// Probability the pair is placed in firing order. Solved from
    /// `outcome_prevalence_target` for the first binary rule when that is
    /// set.
    #[serde(default = "default_forward")]
    pub forward_prob: f64,
}

fn default_hit() -> f64 {
    0.9
}
fn default_base() -> f64 {
    0.02
}
fn default_precursor_rate() -> f64 {
    0.2
}
fn default_forward() -> f64 {
    0.5
}

impl PlantedRule {
    pub fn new(name: &str, p1: &str, p2: &str, target: &str, kind: RuleKind) -> Self {
        PlantedRule {
            name: name.into(),
            precursors: (p1.into(), p2.into()),
            target: target.into(),
            hit_prob: default_hit(),
            base_prob: default_base(),
            kind,
            precursor_rate: default_precursor_rate(),
            forward_prob: default_forward(),
        }
    }

    /// Whether the ordered precursor condition holds within `visits`.
    pub fn condition(&self, visits: &[Visit]) -> bool {
        let first = |code: &str| visits.iter().position(|v| v.contains(code));
        let last_p2 = visits.iter().rposition(|v| v.contains(&self.precursors.1));
        matches!((first(&self.precursors.0), last_p2), (Some(a), Some(b)) if a < b)
    }

    fn validate(&self) -> Result<()> {
        for (what, p) in [
            ("hit_prob", self.hit_prob),
            ("base_prob", self.base_prob),
            ("precursor_rate", self.precursor_rate),
            ("forward_prob", self.forward_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("rule {}: {what} {p} outside [0, 1]", self.name)));
            }
        }
        // Equality is allowed: it plants a rule with no signal.
        if self.hit_prob < self.base_prob {
            return Err(Error::InvalidArgument(format!(
                "rule {}: hit_prob {} below base_prob {}",
                self.name, self.hit_prob, self.base_prob
            )));
        }
        let (p1, p2, t) = (&self.precursors.0, &self.precursors.1, &self.target);
        if p1 == p2 || p1 == t || p2 == t {
            return Err(Error::InvalidArgument(format!("rule {}: precursors and target must differ", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub codes: Vec<String>,
    /// Weight multiplier for the other members, in both chronic and acute
    /// draws, once a patient carries one member as a chronic condition.
    pub boost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_patients: usize,
    pub mean_visits: f64,
    pub sd_visits: f64,
    pub min_visits: u32,
    pub max_visits: u32,
    pub mean_codes_per_visit: f64,
    pub sd_codes: f64,
    pub min_codes: u32,
    pub max_codes: u32,
    pub n_common_codes: usize,
    pub n_rare_codes: usize,
    /// Share of acute draws that come from the common pool.
    pub common_mass: f64,
    pub zipf_exponent: f64,
    pub p_chronic: f64,
    /// Mean number of chronic conditions per patient (Poisson).
    pub chronic_mean: f64,
    /// Chronic conditions are drawn from the first `chronic_pool` common
    /// codes, which never occur as acute draws.
    pub chronic_pool: usize,
    pub comorbidity_clusters: Vec<Cluster>,
    pub planted_rules: Vec<PlantedRule>,
    pub outcome_prevalence_target: Option<f64>,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        let cluster = |codes: &[&str]| Cluster {
            codes: codes.iter().map(|c| c.to_string()).collect(),
            boost: 4.0,
        };
        // Each named rare code is a new onset that follows an ordered
        // precursor pair; the binary outcome has its own pair.
        let mut planted_rules: Vec<PlantedRule> = NAMED_RARE
            .iter()
            .enumerate()
            .map(|(i, target)| PlantedRule {
                base_prob: 0.002,
                precursor_rate: 0.2,
                ..PlantedRule::new(
                    &format!("onset_{i}"),
                    &format!("A{i:02}.1"),
                    &format!("A{i:02}.2"),
                    target,
                    RuleKind::NextVisitCode,
                )
            })
            .collect();
        planted_rules.push(PlantedRule {
            base_prob: 0.005,
            ..PlantedRule::new("outcome", "A10.1", "A10.2", "A10.0", RuleKind::BinaryOutcome)
        });
        GenConfig {
            n_patients: 1000,
            mean_visits: 10.1,
            sd_visits: 3.3,
            min_visits: 2,
            max_visits: 40,
            mean_codes_per_visit: 5.18,
            sd_codes: 3.79,
            min_codes: 1,
            max_codes: 25,
            n_common_codes: 90,
            n_rare_codes: 100,
            common_mass: 0.92,
            zipf_exponent: 0.3,
            p_chronic: 0.7,
            chronic_mean: 4.0,
            chronic_pool: 20,
            comorbidity_clusters: vec![
                cluster(&["E11.9", "E78.5", "I25.10"]),
                cluster(&["F43.12", "F33.9", "G47.33"]),
                cluster(&["M54.5", "M54.50"]),
            ],
            planted_rules,
            outcome_prevalence_target: Some(0.019),
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::InvalidArgument("n_patients must be >= 1".into()));
        }
        if self.min_visits < 2 || self.min_visits > self.max_visits {
            return Err(Error::InvalidArgument(format!(
                "visit range [{}, {}] must start at 2 or more and be non-empty",
                self.min_visits, self.max_visits
            )));
        }
        if self.min_codes < 1 || self.min_codes > self.max_codes {
            return Err(Error::InvalidArgument(format!(
                "codes-per-visit range [{}, {}] must start at 1 or more and be non-empty",
                self.min_codes, self.max_codes
            )));
        }
        for (what, p) in [("p_chronic", self.p_chronic), ("common_mass", self.common_mass)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{what} {p} outside [0, 1]")));
            }
        }
        if let Some(p) = self.outcome_prevalence_target {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("outcome_prevalence_target {p} outside [0, 1]")));
            }
        }
        let positive = [
            ("mean_visits", self.mean_visits),
            ("sd_visits", self.sd_visits),
            ("mean_codes_per_visit", self.mean_codes_per_visit),
            ("sd_codes", self.sd_codes),
        ];
        if let Some((what, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!("{what} {v} must be positive")));
        }
        if !(self.chronic_mean >= 0.0) || !(self.zipf_exponent >= 0.0) {
            return Err(Error::InvalidArgument("chronic_mean and zipf_exponent must be >= 0".into()));
        }
        if self.n_common_codes == 0 {
            return Err(Error::InvalidArgument("n_common_codes must be >= 1".into()));
        }
        if self.chronic_pool > self.n_common_codes {
            return Err(Error::InvalidArgument(format!(
                "chronic_pool {} exceeds n_common_codes {}",
                self.chronic_pool, self.n_common_codes
            )));
        }
        let acute = self.n_common_codes - self.chronic_pool + self.n_rare_codes;
        if self.max_codes as usize > acute {
            return Err(Error::Infeasible(format!(
                "up to {} codes per visit but only {acute} acute codes",
                self.max_codes
            )));
        }
        let mut names = BTreeSet::new();
        for r in &self.planted_rules {
            r.validate()?;
            if !names.insert(r.name.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate rule name {}", r.name)));
            }
        }
        for c in &self.comorbidity_clusters {
            if !(c.boost > 0.0) {
                return Err(Error::InvalidArgument(format!("cluster boost {} must be positive", c.boost)));
            }
        }
        Ok(())
    }

    /// A copy with the first binary rule's `forward_prob` solved so the
    /// expected label prevalence equals `outcome_prevalence_target`:
    /// `pi = base + rate * forward * (hit - base)`.
    pub fn resolved(&self) -> Result<GenConfig> {
        self.validate()?;
        let mut out = self.clone();
        let Some(pi) = self.outcome_prevalence_target else {
            return Ok(out);
        };
        let Some(rule) = out.planted_rules.iter_mut().find(|r| r.kind == RuleKind::BinaryOutcome) else {
            return Ok(out);
        };
        let reach = rule.precursor_rate * (rule.hit_prob - rule.base_prob);
        let forward = if reach > 0.0 { (pi - rule.base_prob) / reach } else { f64::NAN };
        if !(0.0..=1.0).contains(&forward) {
            return Err(Error::Infeasible(format!(
                "prevalence {pi} unreachable for rule {} (base {}, hit {}, precursor rate {})",
                rule.name, rule.base_prob, rule.hit_prob, rule.precursor_rate
            )));
        }
        rule.forward_prob = forward;
        let pair = rule.precursors.clone();
        // Rules sharing the pair share its placement.
        for r in out.planted_rules.iter_mut().filter(|r| r.precursors == pair) {
            r.forward_prob = forward;
        }
        Ok(out)
    }

    /// Expected label prevalence of a rule under this configuration.
    pub fn expected_prevalence(&self, rule: &str) -> Result<f64> {
        let r = self.rule(rule)?;
        let placement = self.placement(r);
        Ok(r.base_prob + placement.precursor_rate * placement.forward_prob * (r.hit_prob - r.base_prob))
    }

    pub fn rule(&self, name: &str) -> Result<&PlantedRule> {
        self.planted_rules
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::UnknownRule(name.into()))
    }

    /// The rule that owns the placement of `rule`'s precursor pair.
    fn placement<'a>(&'a self, rule: &'a PlantedRule) -> &'a PlantedRule {
        self.planted_rules
            .iter()
            .find(|r| r.precursors == rule.precursors)
            .unwrap_or(rule)
    }
}

/// Common and rare background codes, most frequent first. Named codes
/// claimed by a planted rule are left out of the pools.
pub fn code_pools(config: &GenConfig) -> (Vec<String>, Vec<String>) {
    let reserved = reserved_codes(config);
    let pool = |list: &[&str], n: usize, prefix: char| -> Vec<String> {
        let named = list.iter().filter(|c| !reserved.contains(**c)).map(|c| c.to_string());
        let synthetic = (0..).map(move |i: usize| format!("{prefix}{:02}.{}", i / 10, i % 10));
        named.chain(synthetic).take(n).collect()
    };
    (
        pool(&NAMED_COMMON, config.n_common_codes, 'Y'),
        pool(&NAMED_RARE, config.n_rare_codes, 'W'),
    )
}

fn reserved_codes(config: &GenConfig) -> BTreeSet<&str> {
    config
        .planted_rules
        .iter()
        .flat_map(|r| [r.precursors.0.as_str(), r.precursors.1.as_str(), r.target.as_str()])
        .collect()
}

/// Rounded normal truncated to `lo..=hi`, with its pre-rounding parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteNormal {
    pub mu: f64,
    pub sigma: f64,
    pub lo: u32,
    pub hi: u32,
}

fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / core::f64::consts::SQRT_2))
}

impl DiscreteNormal {
    /// Probability of each value `lo..=hi`.
    pub fn pmf(&self) -> Vec<f64> {
        let raw: Vec<f64> = (self.lo..=self.hi)
            .map(|k| {
                let k = k as f64;
                phi((k + 0.5 - self.mu) / self.sigma) - phi((k - 0.5 - self.mu) / self.sigma)
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|p| p / total).collect()
    }

    pub fn acceptance(&self) -> f64 {
        phi((self.hi as f64 + 0.5 - self.mu) / self.sigma) - phi((self.lo as f64 - 0.5 - self.mu) / self.sigma)
    }

    pub fn moments(&self) -> (f64, f64) {
        let pmf = self.pmf();
        let mean: f64 = pmf.iter().enumerate().map(|(i, p)| (self.lo as f64 + i as f64) * p).sum();
        let var: f64 = pmf
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d = self.lo as f64 + i as f64 - mean;
                d * d * p
            })
            .sum();
        (mean, libm::sqrt(var))
    }

    /// Finds `mu` and `sigma` whose truncated, rounded distribution has the
    /// given mean and standard deviation, by nested bisection.
    pub fn calibrate(mean: f64, sd: f64, lo: u32, hi: u32) -> Result<Self> {
        let infeasible = || Error::Infeasible(format!("no rounded normal on [{lo}, {hi}] has mean {mean} and sd {sd}"));
        if !(mean > lo as f64 && mean < hi as f64) {
            return Err(infeasible());
        }
        let fit_mu = |sigma: f64| -> DiscreteNormal {
            let (mut a, mut b) = (lo as f64 - 6.0 * sigma - 1.0, hi as f64 + 6.0 * sigma + 1.0);
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                let d = DiscreteNormal { mu: m, sigma, lo, hi };
                if d.acceptance() > 0.0 && d.moments().0 < mean {
                    a = m;
                } else {
                    b = m;
                }
            }
            DiscreteNormal { mu: 0.5 * (a + b), sigma, lo, hi }
        };
        let span = (hi - lo) as f64;
        let (mut a, mut b) = (0.05, 4.0 * span + 4.0);
        if fit_mu(b).moments().1 < sd || fit_mu(a).moments().1 > sd {
            return Err(infeasible());
        }
        for _ in 0..100 {
            let m = 0.5 * (a + b);
            if fit_mu(m).moments().1 < sd {
                a = m;
            } else {
                b = m;
            }
        }
        let d = fit_mu(0.5 * (a + b));
        let (m, s) = d.moments();
        if (m - mean).abs() > 1e-6 || (s - sd).abs() > 1e-6 || d.acceptance() < 1e-3 {
            return Err(infeasible());
        }
        Ok(d)
    }

    pub fn sample(&self, rng: &mut Rng) -> u32 {
        let normal = Normal::new(self.mu, self.sigma).expect("positive sigma");
        loop {
            let x = libm::round(normal.sample(rng));
            if x >= self.lo as f64 && x <= self.hi as f64 {
                return x as u32;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub patient_id: String,
    pub label: u8,
    pub rule: String,
}

pub type LabelMap = Vec<LabelEntry>;

/// Labels of `rule` in cohort order.
pub fn labels_for(labels: &LabelMap, cohort: &[PatientRecord], rule: &str) -> Result<Vec<u8>> {
    let by_id: BTreeMap<&str, u8> = labels
        .iter()
        .filter(|e| e.rule == rule)
        .map(|e| (e.patient_id.as_str(), e.label))
        .collect();
    if by_id.is_empty() {
        return Err(Error::UnknownRule(rule.into()));
    }
    cohort
        .iter()
        .map(|r| {
            by_id.get(r.patient_id.as_str()).copied().ok_or_else(|| {
                Error::InvalidArgument(format!("no {rule} label for patient {}", r.patient_id))
            })
        })
        .collect()
}

/// A validated configuration with its calibrated distributions and pools.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GenConfig,
    visits: DiscreteNormal,
    codes: DiscreteNormal,
    common: Vec<String>,
    rare: Vec<String>,
    /// Zipf weights of the chronic-capable common codes.
    chronic_weights: Vec<f64>,
    /// Acute-draw weights over common then rare codes.
    background: Vec<f64>,
    /// Distinct precursor pairs with their placement rates.
    pairs: Vec<(String, String, f64, f64)>,
}

impl Generator {
    pub fn new(config: &GenConfig) -> Result<Self> {
        let config = config.resolved()?;
        let visits = DiscreteNormal::calibrate(config.mean_visits, config.sd_visits, config.min_visits, config.max_visits)?;
        let codes =
            DiscreteNormal::calibrate(config.mean_codes_per_visit, config.sd_codes, config.min_codes, config.max_codes)?;
        let (common, rare) = code_pools(&config);
        let reserved = reserved_codes(&config);
        if let Some(c) = common.iter().chain(&rare).find(|c| reserved.contains(c.as_str())) {
            return Err(Error::InvalidArgument(format!("rule code {c} collides with a background code")));
        }
        let zipf = |n: usize| -> Vec<f64> {
            let w: Vec<f64> = (0..n).map(|i| 1.0 / libm::pow(i as f64 + 1.0, config.zipf_exponent)).collect();
            let total: f64 = w.iter().sum();
            w.iter().map(|x| x / total).collect()
        };
        let k = config.chronic_pool;
        let chronic_weights = zipf(k);
        let n_acute_common = common.len() - k;
        let rare_mass = match (rare.is_empty(), n_acute_common) {
            (true, _) => 0.0,
            (false, 0) => 1.0,
            _ => 1.0 - config.common_mass,
        };
        let mut background = vec![0.0; k];
        background.extend(zipf(n_acute_common).iter().map(|w| (1.0 - rare_mass) * w));
        background.extend(rare.iter().map(|_| rare_mass / rare.len() as f64));

        let mut pairs: Vec<(String, String, f64, f64)> = Vec::new();
        for r in &config.planted_rules {
            if !pairs.iter().any(|p| (&p.0, &p.1) == (&r.precursors.0, &r.precursors.1)) {
                pairs.push((r.precursors.0.clone(), r.precursors.1.clone(), r.precursor_rate, r.forward_prob));
            }
        }
        Ok(Generator {
            config,
            visits,
            codes,
            common,
            rare,
            chronic_weights,
            background,
            pairs,
        })
    }

    /// The configuration after prevalence solving.
    pub fn config(&self) -> &GenConfig {
        &self.config
    }

    pub fn visit_distribution(&self) -> DiscreteNormal {
        self.visits
    }

    pub fn code_distribution(&self) -> DiscreteNormal {
        self.codes
    }

    /// Acute-draw weights over the common then the rare pool.
    pub fn acute_weights(&self) -> &[f64] {
        &self.background
    }

    pub fn common_codes(&self) -> &[String] {
        &self.common
    }

    pub fn rare_codes(&self) -> &[String] {
        &self.rare
    }

    /// Patient `index`, drawn from its own stream so any subset can be
    /// generated independently.
    pub fn patient(&self, index: usize) -> (PatientRecord, Vec<LabelEntry>) {
        let cfg = &self.config;
        let mut rng = rng::derived(cfg.seed, index as u64);
        let patient_id = format!("P{index:06}");
        let age = libm::round(Normal::new(60.0, 15.0).unwrap().sample(&mut rng)).clamp(18.0, 99.0) as u32;
        let sex = if rng.random::<f64>() < 0.85 { Sex::M } else { Sex::F };
        let n_visits = self.visits.sample(&mut rng) as usize;
        let sizes: Vec<usize> = (0..n_visits).map(|_| self.codes.sample(&mut rng) as usize).collect();

        // Chronic conditions; picking one boosts its cluster partners.
        let n_chronic = if cfg.chronic_mean > 0.0 && !self.chronic_weights.is_empty() {
            (Poisson::new(cfg.chronic_mean).unwrap().sample(&mut rng) as usize).min(self.chronic_weights.len())
        } else {
            0
        };
        let mut chronic_w = self.chronic_weights.clone();
        let mut weights = self.background.clone();
        let mut chronic: Vec<(usize, usize)> = Vec::new();
        while chronic.len() < n_chronic {
            let c = WeightedIndex::new(&chronic_w).unwrap().sample(&mut rng);
            chronic_w[c] = 0.0;
            let onset = if rng.random::<f64>() < 0.5 { 0 } else { rng.random_range(0..n_visits) };
            chronic.push((c, onset));
            for cluster in cfg.comorbidity_clusters.iter().filter(|cl| cl.codes.contains(&self.common[c])) {
                for code in &cluster.codes {
                    if let Some(i) = self.common.iter().chain(&self.rare).position(|x| x == code) {
                        if i < chronic_w.len() {
                            chronic_w[i] *= cluster.boost;
                        }
                        weights[i] *= cluster.boost;
                    }
                }
            }
        }
        let acute = WeightedIndex::new(&weights).unwrap();

        let mut planted: Vec<Vec<String>> = vec![Vec::new(); n_visits];
        for (p1, p2, rate, forward) in &self.pairs {
            if rng.random::<f64>() < *rate {
                let i = rng.random_range(0..n_visits);
                let mut j = rng.random_range(0..n_visits - 1);
                if j >= i {
                    j += 1;
                }
                let (early, late) = (i.min(j), i.max(j));
                let (a, b) = if rng.random::<f64>() < *forward { (p1, p2) } else { (p2, p1) };
                planted[early].push(a.clone());
                planted[late].push(b.clone());
            }
        }

        let mut visits: Vec<Visit> = Vec::with_capacity(n_visits);
        for t in 0..n_visits {
            let mut codes: Vec<String> = core::mem::take(&mut planted[t]);
            for rule in cfg.planted_rules.iter().filter(|r| r.kind == RuleKind::NextVisitCode) {
                let p = if rule.condition(&visits) {
                    rule.hit_prob
                } else {
                    rule.base_prob
                };
                if rng.random::<f64>() < p && !codes.contains(&rule.target) {
                    codes.push(rule.target.clone());
                }
            }
            let size = sizes[t].max(codes.len());
            let mut background: Vec<usize> = Vec::new();
            for &(c, onset) in &chronic {
                if t == onset || (t > onset && rng.random::<f64>() < cfg.p_chronic) {
                    background.push(c);
                }
            }
            background.truncate(size - codes.len());
            while codes.len() + background.len() < size {
                let c = acute.sample(&mut rng);
                if !background.contains(&c) {
                    background.push(c);
                }
            }
            codes.extend(background.into_iter().map(|c| self.name(c).to_string()));
            visits.push(Visit { codes });
        }

        let labels = cfg
            .planted_rules
            .iter()
            .filter(|r| r.kind == RuleKind::BinaryOutcome)
            .map(|r| {
                let p = if r.condition(&visits) { r.hit_prob } else { r.base_prob };
                LabelEntry {
                    patient_id: patient_id.clone(),
                    label: u8::from(rng.random::<f64>() < p),
                    rule: r.name.clone(),
                }
            })
            .collect();
        let record = PatientRecord {
            patient_id,
            demographics: Demographics { age_years: age, sex },
            visits,
        };
        (record, labels)
    }

    fn name(&self, background_index: usize) -> &str {
        if background_index < self.common.len() {
            &self.common[background_index]
        } else {
            &self.rare[background_index - self.common.len()]
        }
    }

    /// Patients `range`, in order.
    pub fn patients(&self, range: core::ops::Range<usize>) -> (Vec<PatientRecord>, LabelMap) {
        let mut cohort = Vec::with_capacity(range.len());
        let mut labels = Vec::new();
        for i in range {
            let (r, l) = self.patient(i);
            cohort.push(r);
            labels.extend(l);
        }
        (cohort, labels)
    }
}

pub fn generate_cohort(config: &GenConfig) -> Result<(Vec<PatientRecord>, LabelMap)> {
    let g = Generator::new(config)?;
    Ok(g.patients(0..g.config.n_patients))
}

/// Exact generative probability that `rule` fires given the whole of
/// `record`'s history.
pub fn oracle_posterior(config: &GenConfig, record: &PatientRecord, rule: &str) -> Result<f64> {
    let r = config.rule(rule)?;
    Ok(if r.condition(&record.visits) { r.hit_prob } else { r.base_prob })
}

/// AUROC of [`oracle_posterior`] against `labels`: the ranking ceiling for
/// any model of this rule.
pub fn oracle_auroc(config: &GenConfig, cohort: &[PatientRecord], labels: &[u8], rule: &str) -> Result<f64> {
    let scores = cohort
        .iter()
        .map(|r| oracle_posterior(config, r, rule))
        .collect::<Result<Vec<f64>>>()?;
    metrics::auroc(&scores, labels)
}

/// Summary statistics of a generated cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub n_patients: usize,
    pub mean_visits: f64,
    pub sd_visits: f64,
    pub mean_codes_per_visit: f64,
    pub sd_codes_per_visit: f64,
    /// Mean over pool codes of the share of patients carrying the code.
    pub common_code_prevalence: f64,
    pub rare_code_prevalence: f64,
    pub label_prevalence: BTreeMap<String, f64>,
}

fn mean_sd(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

pub fn cohort_stats(config: &GenConfig, cohort: &[PatientRecord], labels: &LabelMap) -> Result<CohortStats> {
    if cohort.is_empty() {
        return Err(Error::Empty("cohort"));
    }
    let (common, rare) = code_pools(config);
    let (mean_visits, sd_visits) = mean_sd(cohort.iter().map(|r| r.visits.len() as f64));
    let (mean_codes, sd_codes) = mean_sd(cohort.iter().flat_map(|r| r.visits.iter().map(|v| v.codes.len() as f64)));
    let mut carriers: BTreeMap<&str, usize> = BTreeMap::new();
    for r in cohort {
        let codes: BTreeSet<&str> = r.visits.iter().flat_map(|v| v.codes.iter().map(String::as_str)).collect();
        for c in codes {
            *carriers.entry(c).or_default() += 1;
        }
    }
    let prevalence = |pool: &[String]| -> f64 {
        if pool.is_empty() {
            return 0.0;
        }
        pool.iter()
            .map(|c| carriers.get(c.as_str()).copied().unwrap_or(0) as f64 / cohort.len() as f64)
            .sum::<f64>()
            / pool.len() as f64
    };
    let mut label_prevalence = BTreeMap::new();
    for rule in config.planted_rules.iter().filter(|r| r.kind == RuleKind::BinaryOutcome) {
        let l = labels_for(labels, cohort, &rule.name)?;
        label_prevalence.insert(rule.name.clone(), l.iter().map(|&x| x as f64).sum::<f64>() / l.len() as f64);
    }
    Ok(CohortStats {
        n_patients: cohort.len(),
        mean_visits,
        sd_visits,
        mean_codes_per_visit: mean_codes,
        sd_codes_per_visit: sd_codes,
        common_code_prevalence: prevalence(&common),
        rare_code_prevalence: prevalence(&rare),
        label_prevalence,
    })
}

/// The tracked code sets for next-visit reports: the ten named common and
/// ten named rare diagnoses.
pub fn code_sets() -> metrics::CodeSets {
    metrics::CodeSets {
        common: NAMED_COMMON.iter().map(|c| c.to_string()).collect(),
        rare: NAMED_RARE.iter().map(|c| c.to_string()).collect(),
    }
}
