//! Synthetic preference population and expert demonstrations.
//!
//! Preferences are object x location weight matrices drawn around a small
//! number of shared mode centers, so splits sampled from the same config
//! share subpopulation structure while remaining disjoint by id.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{EnvironmentSpec, Episode, WorldState};
use crate::error::{Error, Result};
use crate::policy::masked_argmax;
use crate::rng::{derive_seed, rng_for, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Eval, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Eval => 1,
            Split::Test => 2,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceMatrix {
    pub theta: Array2<f64>,
    pub preference_id: String,
    pub mode_id: usize,
}

impl PreferenceMatrix {
    pub fn new(
        theta: Array2<f64>,
        preference_id: impl Into<String>,
        mode_id: usize,
    ) -> Result<Self> {
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("preference weights must be finite".into()));
        }
        Ok(PreferenceMatrix {
            theta,
            preference_id: preference_id.into(),
            mode_id,
        })
    }

    pub fn matches(&self, spec: &EnvironmentSpec) -> bool {
        self.theta.dim() == (spec.num_objects, spec.num_locations)
    }

    /// Expert corrector: argmax-with-mask over this preference's row.
    pub fn expert(&self) -> impl FnMut(&WorldState, usize, &[usize]) -> Result<usize> + '_ {
        move |_, a_h, vacant| expert_placement(self, a_h, vacant)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub eval: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Eval => self.eval,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    pub num_modes: usize,
    pub prefs_per_split: SplitCounts,
    pub episodes_per_pref: SplitCounts,
    pub mode_center_scale: f64,
    pub within_mode_std: f64,
    pub seed: u64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            num_modes: 4,
            prefs_per_split: SplitCounts {
                train: 1000,
                eval: 100,
                test: 100,
            },
            episodes_per_pref: SplitCounts {
                train: 100,
                eval: 20,
                test: 20,
            },
            mode_center_scale: 1.0,
            within_mode_std: 0.1,
            seed: 0,
        }
    }
}

impl PopulationConfig {
    /// Laptop-sized population used by the default CLI profile.
    pub fn desk(seed: u64) -> Self {
        PopulationConfig {
            prefs_per_split: SplitCounts {
                train: 32,
                eval: 16,
                test: 16,
            },
            episodes_per_pref: SplitCounts {
                train: 20,
                eval: 10,
                test: 10,
            },
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_modes == 0 {
            return Err(Error::Config("num_modes must be at least 1".into()));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.mode_center_scale) || !finite_nonneg(self.within_mode_std) {
            return Err(Error::Config(
                "scales must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    pub spec: EnvironmentSpec,
    pub config: PopulationConfig,
    pub train: Vec<PreferenceMatrix>,
    pub eval: Vec<PreferenceMatrix>,
    pub test: Vec<PreferenceMatrix>,
}

impl Population {
    pub fn split(&self, split: Split) -> &[PreferenceMatrix] {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
            Split::Test => &self.test,
        }
    }

    pub fn to_file(&self) -> PopulationFile {
        let mut preferences = Vec::new();
        for split in Split::ALL {
            for p in self.split(split) {
                preferences.push(PreferenceEntry {
                    id: p.preference_id.clone(),
                    split,
                    mode_id: p.mode_id,
                    theta: p.theta.iter().copied().collect(),
                });
            }
        }
        PopulationFile {
            spec: self.spec,
            config: self.config.clone(),
            preferences,
        }
    }
}

/// On-disk population: row-major weights per preference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationFile {
    pub spec: EnvironmentSpec,
    pub config: PopulationConfig,
    pub preferences: Vec<PreferenceEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceEntry {
    pub id: String,
    pub split: Split,
    pub mode_id: usize,
    pub theta: Vec<f64>,
}

impl TryFrom<PopulationFile> for Population {
    type Error = Error;

    fn try_from(file: PopulationFile) -> Result<Self> {
        file.spec.validate()?;
        file.config.validate()?;
        let (o, l) = (file.spec.num_objects, file.spec.num_locations);
        let mut pop = Population {
            spec: file.spec,
            config: file.config,
            train: Vec::new(),
            eval: Vec::new(),
            test: Vec::new(),
        };
        let mut seen = BTreeSet::new();
        for entry in file.preferences {
            if !seen.insert(entry.id.clone()) {
                return Err(Error::Config(format!(
                    "duplicate preference id `{}`",
                    entry.id
                )));
            }
            if entry.theta.len() != o * l {
                return Err(Error::DimensionMismatch(format!(
                    "preference `{}` has {} weights, expected {}",
                    entry.id,
                    entry.theta.len(),
                    o * l
                )));
            }
            let theta = Array2::from_shape_vec((o, l), entry.theta)
                .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
            let pref = PreferenceMatrix::new(theta, entry.id, entry.mode_id)?;
            match entry.split {
                Split::Train => pop.train.push(pref),
                Split::Eval => pop.eval.push(pref),
                Split::Test => pop.test.push(pref),
            }
        }
        Ok(pop)
    }
}

fn normal_matrix(o: usize, l: usize, std: f64, rng: &mut crate::rng::Rng) -> Array2<f64> {
    if std == 0.0 {
        return Array2::zeros((o, l));
    }
    let dist = Normal::new(0.0, std).expect("validated std");
    Array2::from_shape_simple_fn((o, l), || dist.sample(rng))
}

/// Mode centers shared by every split of a population config.
pub fn mode_centers(cfg: &PopulationConfig, spec: &EnvironmentSpec) -> Vec<Array2<f64>> {
    let mut rng = rng_for(cfg.seed, &[stream::MODE_CENTERS]);
    (0..cfg.num_modes)
        .map(|_| {
            normal_matrix(
                spec.num_objects,
                spec.num_locations,
                cfg.mode_center_scale,
                &mut rng,
            )
        })
        .collect()
}

pub fn sample_split(
    cfg: &PopulationConfig,
    spec: &EnvironmentSpec,
    centers: &[Array2<f64>],
    split: Split,
) -> Vec<PreferenceMatrix> {
    let mut rng = rng_for(cfg.seed, &[stream::PREFERENCES, split.index()]);
    (0..cfg.prefs_per_split.get(split))
        .map(|i| {
            let mode = i % cfg.num_modes;
            let noise = normal_matrix(
                spec.num_objects,
                spec.num_locations,
                cfg.within_mode_std,
                &mut rng,
            );
            PreferenceMatrix {
                theta: &centers[mode] + &noise,
                preference_id: format!("{}-{i:04}", split.as_str()),
                mode_id: mode,
            }
        })
        .collect()
}

pub fn sample_population(cfg: &PopulationConfig, spec: &EnvironmentSpec) -> Result<Population> {
    cfg.validate()?;
    spec.validate()?;
    let centers = mode_centers(cfg, spec);
    Ok(Population {
        spec: *spec,
        config: cfg.clone(),
        train: sample_split(cfg, spec, &centers, Split::Train),
        eval: sample_split(cfg, spec, &centers, Split::Eval),
        test: sample_split(cfg, spec, &centers, Split::Test),
    })
}

/// Masked argmax of the preference row for `a_h`; ties go to the lowest location.
pub fn expert_placement(theta: &PreferenceMatrix, a_h: usize, vacant: &[usize]) -> Result<usize> {
    if a_h >= theta.theta.nrows() {
        return Err(Error::UnknownObject(a_h));
    }
    let row = theta.theta.row(a_h);
    masked_argmax(row.as_slice().expect("standard layout"), vacant)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemonstrationDataset {
    pub split: Split,
    pub episodes: Vec<Episode>,
    pub population: Vec<PreferenceMatrix>,
}

impl DemonstrationDataset {
    pub fn num_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    pub fn preference(&self, id: &str) -> Option<&PreferenceMatrix> {
        self.population.iter().find(|p| p.preference_id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let ids: BTreeSet<&str> = self
            .population
            .iter()
            .map(|p| p.preference_id.as_str())
            .collect();
        for ep in &self.episodes {
            if !ids.contains(ep.preference_id.as_str()) {
                return Err(Error::MalformedEpisode(format!(
                    "unknown preference `{}`",
                    ep.preference_id
                )));
            }
        }
        Ok(())
    }
}

/// Seed of demonstration episode `episode` for preference `pref_index`.
pub fn demo_episode_seed(seed: u64, split: Split, pref_index: usize, episode: usize) -> u64 {
    derive_seed(
        seed,
        &[
            stream::EPISODES,
            split.index(),
            pref_index as u64,
            episode as u64,
        ],
    )
}

/// Expert rollouts: robot and corrector both act with the true weights.
pub fn collect_demonstrations(
    population: &[PreferenceMatrix],
    spec: &EnvironmentSpec,
    episodes_per_pref: usize,
    seed: u64,
    split: Split,
) -> Result<DemonstrationDataset> {
    if population.is_empty() {
        return Err(Error::Config("population is empty".into()));
    }
    let mut episodes = Vec::with_capacity(population.len() * episodes_per_pref);
    for (pi, pref) in population.iter().enumerate() {
        if !pref.matches(spec) {
            return Err(Error::DimensionMismatch(format!(
                "preference `{}` does not match the environment",
                pref.preference_id
            )));
        }
        for e in 0..episodes_per_pref {
            let ep_seed = demo_episode_seed(seed, split, pi, e);
            let mut robot = pref.expert();
            let mut corrector = pref.expert();
            episodes.push(Episode::run(
                spec,
                pref.preference_id.clone(),
                ep_seed,
                &mut robot,
                &mut corrector,
            )?);
        }
    }
    Ok(DemonstrationDataset {
        split,
        episodes,
        population: population.to_vec(),
    })
}

/// Demonstrations for one split of a sampled population.
pub fn demonstrations_for(pop: &Population, split: Split) -> Result<DemonstrationDataset> {
    collect_demonstrations(
        pop.split(split),
        &pop.spec,
        pop.config.episodes_per_pref.get(split),
        pop.config.seed,
        split,
    )
}
