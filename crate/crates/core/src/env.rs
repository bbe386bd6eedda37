//! Assistive surface rearrangement simulator.
//!
//! An episode draws `L` distinct objects from an `O`-object catalog and
//! presents `L` unit-capacity locations. Each turn the leader picks an
//! unplaced object, the assistant proposes a vacant location, and the leader
//! answers with a correction that is authoritative: the object ends up where
//! the correction says.

use std::fmt;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Rng};

/// Largest catalog/location count the token vocabulary can address.
pub const MAX_IDS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvName {
    Small,
    Medium,
    Large,
    Custom,
}

impl EnvName {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::Small => "small",
            EnvName::Medium => "medium",
            EnvName::Large => "large",
            EnvName::Custom => "custom",
        }
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EnvName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(EnvName::Small),
            "medium" => Ok(EnvName::Medium),
            "large" => Ok(EnvName::Large),
            "custom" => Ok(EnvName::Custom),
            other => Err(Error::InvalidSpec(format!("unknown environment `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct EnvironmentSpec {
    pub num_objects: usize,
    pub num_locations: usize,
    pub capacity_per_location: usize,
    pub name: EnvName,
}

#[derive(Deserialize)]
struct RawSpec {
    num_objects: usize,
    num_locations: usize,
    #[serde(default = "one")]
    capacity_per_location: usize,
    name: EnvName,
}

fn one() -> usize {
    1
}

impl TryFrom<RawSpec> for EnvironmentSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        let spec = EnvironmentSpec {
            num_objects: raw.num_objects,
            num_locations: raw.num_locations,
            capacity_per_location: raw.capacity_per_location,
            name: raw.name,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl EnvironmentSpec {
    pub const fn small() -> Self {
        Self::preset_dims(EnvName::Small, 5, 5)
    }

    pub const fn medium() -> Self {
        Self::preset_dims(EnvName::Medium, 10, 10)
    }

    pub const fn large() -> Self {
        Self::preset_dims(EnvName::Large, 25, 25)
    }

    const fn preset_dims(name: EnvName, o: usize, l: usize) -> Self {
        EnvironmentSpec {
            num_objects: o,
            num_locations: l,
            capacity_per_location: 1,
            name,
        }
    }

    pub fn custom(num_objects: usize, num_locations: usize) -> Result<Self> {
        let spec = Self::preset_dims(EnvName::Custom, num_objects, num_locations);
        spec.validate()?;
        Ok(spec)
    }

    /// Preset by name. `custom` has no default dimensions.
    pub fn preset(name: EnvName) -> Result<Self> {
        match name {
            EnvName::Small => Ok(Self::small()),
            EnvName::Medium => Ok(Self::medium()),
            EnvName::Large => Ok(Self::large()),
            EnvName::Custom => Err(Error::InvalidSpec(
                "custom environments need explicit object and location counts".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_objects == 0 || self.num_locations == 0 {
            return Err(Error::InvalidSpec(
                "need at least one object and location".into(),
            ));
        }
        if self.num_objects > MAX_IDS || self.num_locations > MAX_IDS {
            return Err(Error::InvalidSpec(format!(
                "at most {MAX_IDS} objects and {MAX_IDS} locations are addressable"
            )));
        }
        if self.capacity_per_location != 1 {
            return Err(Error::InvalidSpec("location capacity must be 1".into()));
        }
        let preset = match self.name {
            EnvName::Small => Some(Self::small()),
            EnvName::Medium => Some(Self::medium()),
            EnvName::Large => Some(Self::large()),
            EnvName::Custom => None,
        };
        if let Some(p) = preset {
            if p.num_objects != self.num_objects || p.num_locations != self.num_locations {
                return Err(Error::InvalidSpec(format!(
                    "`{}` must be {}x{}",
                    self.name, p.num_objects, p.num_locations
                )));
            }
        }
        Ok(())
    }

    /// Number of entries in an object x location matrix.
    pub fn cells(&self) -> usize {
        self.num_objects * self.num_locations
    }
}

/// Observable world: which episode objects sit where.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorldState {
    episode_objects: Vec<usize>,
    placement: Vec<Option<usize>>,
    occupancy: Vec<Option<usize>>,
    in_episode: Vec<bool>,
    turn_index: usize,
}

impl WorldState {
    /// Fresh state over an explicit object set (sorted and deduplicated).
    pub fn with_objects(spec: &EnvironmentSpec, objects: &[usize]) -> Result<Self> {
        spec.validate()?;
        let mut episode_objects = objects.to_vec();
        episode_objects.sort_unstable();
        episode_objects.dedup();
        if episode_objects.len() != objects.len() {
            return Err(Error::InvalidSpec(
                "episode objects must be distinct".into(),
            ));
        }
        if episode_objects.len() != spec.num_locations {
            return Err(Error::InvalidSpec(format!(
                "an episode holds exactly {} objects, got {}",
                spec.num_locations,
                episode_objects.len()
            )));
        }
        let mut in_episode = vec![false; spec.num_objects];
        for &o in &episode_objects {
            if o >= spec.num_objects {
                return Err(Error::UnknownObject(o));
            }
            in_episode[o] = true;
        }
        Ok(WorldState {
            episode_objects,
            placement: vec![None; spec.num_objects],
            occupancy: vec![None; spec.num_locations],
            in_episode,
            turn_index: 0,
        })
    }

    pub fn episode_objects(&self) -> &[usize] {
        &self.episode_objects
    }

    pub fn num_locations(&self) -> usize {
        self.occupancy.len()
    }

    pub fn num_objects(&self) -> usize {
        self.placement.len()
    }

    pub fn turn_index(&self) -> usize {
        self.turn_index
    }

    pub fn placement_of(&self, object: usize) -> Option<usize> {
        self.placement.get(object).copied().flatten()
    }

    pub fn occupant_of(&self, location: usize) -> Option<usize> {
        self.occupancy.get(location).copied().flatten()
    }

    pub fn contains_object(&self, object: usize) -> bool {
        self.in_episode.get(object).copied().unwrap_or(false)
    }

    pub fn is_vacant(&self, location: usize) -> bool {
        matches!(self.occupancy.get(location), Some(None))
    }

    pub fn is_unplaced(&self, object: usize) -> bool {
        self.contains_object(object) && self.placement[object].is_none()
    }

    pub fn is_complete(&self) -> bool {
        self.occupancy.iter().all(Option::is_some)
    }

    pub fn vacant_locations(&self) -> Vec<usize> {
        (0..self.occupancy.len())
            .filter(|&l| self.occupancy[l].is_none())
            .collect()
    }

    pub fn unplaced_objects(&self) -> Vec<usize> {
        self.episode_objects
            .iter()
            .copied()
            .filter(|&o| self.placement[o].is_none())
            .collect()
    }

    fn check_placement(&self, object: usize, location: usize) -> Result<()> {
        if !self.contains_object(object) {
            return Err(Error::UnknownObject(object));
        }
        if location >= self.occupancy.len() {
            return Err(Error::UnknownLocation(location));
        }
        if self.placement[object].is_some() {
            return Err(Error::AlreadyPlaced(object));
        }
        if self.occupancy[location].is_some() {
            return Err(Error::OccupiedLocation(location));
        }
        Ok(())
    }

    /// Places `object` at `location` in place. Does not advance the turn.
    pub fn place(&mut self, object: usize, location: usize) -> Result<()> {
        self.check_placement(object, location)?;
        self.placement[object] = Some(location);
        self.occupancy[location] = Some(object);
        Ok(())
    }
}

pub fn vacant_locations(state: &WorldState) -> Vec<usize> {
    state.vacant_locations()
}

pub fn unplaced_objects(state: &WorldState) -> Vec<usize> {
    state.unplaced_objects()
}

pub fn apply_placement(state: &WorldState, object: usize, location: usize) -> Result<WorldState> {
    let mut next = state.clone();
    next.place(object, location)?;
    Ok(next)
}

/// Draws the episode's objects uniformly without replacement.
pub fn new_episode(spec: &EnvironmentSpec, seed: u64) -> Result<WorldState> {
    spec.validate()?;
    if spec.num_locations > spec.num_objects {
        return Err(Error::InvalidSpec(format!(
            "an episode needs {} objects but the catalog has {}",
            spec.num_locations, spec.num_objects
        )));
    }
    let mut rng = rng_for(seed, &[OBJECT_STREAM]);
    let objects = sample(&mut rng, spec.num_objects, spec.num_locations).into_vec();
    WorldState::with_objects(spec, &objects)
}

const OBJECT_STREAM: u64 = 0x0b;
const PICK_STREAM: u64 = 0x9c;

/// The leader's pick stream for an episode seed.
pub fn pick_rng(seed: u64) -> Rng {
    rng_for(seed, &[PICK_STREAM])
}

/// Uniformly random unplaced object.
pub fn random_pick(state: &WorldState, rng: &mut Rng) -> Result<usize> {
    let unplaced = state.unplaced_objects();
    if unplaced.is_empty() {
        return Err(Error::Session("episode already complete".into()));
    }
    Ok(unplaced[rng.gen_range(0..unplaced.len())])
}

/// Chooses a location for the picked object among the vacant ones.
pub trait PlacementChooser {
    fn choose(&mut self, state: &WorldState, a_h: usize, vacant: &[usize]) -> Result<usize>;
}

impl<F> PlacementChooser for F
where
    F: FnMut(&WorldState, usize, &[usize]) -> Result<usize>,
{
    fn choose(&mut self, state: &WorldState, a_h: usize, vacant: &[usize]) -> Result<usize> {
        self(state, a_h, vacant)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepRecord {
    pub state_before: WorldState,
    pub a_h: usize,
    pub a_r: usize,
    pub a_c: usize,
    pub state_after: WorldState,
}

impl StepRecord {
    pub fn agreed(&self) -> bool {
        self.a_r == self.a_c
    }

    pub fn actions(&self) -> [usize; 3] {
        [self.a_h, self.a_r, self.a_c]
    }
}

fn check_choice(state: &WorldState, location: usize) -> Result<()> {
    if location >= state.num_locations() {
        Err(Error::UnknownLocation(location))
    } else if !state.is_vacant(location) {
        Err(Error::OccupiedLocation(location))
    } else {
        Ok(())
    }
}

/// Resolves one turn from explicit actions.
pub fn resolve_turn(state: &WorldState, a_h: usize, a_r: usize, a_c: usize) -> Result<StepRecord> {
    if !state.contains_object(a_h) {
        return Err(Error::UnknownObject(a_h));
    }
    if !state.is_unplaced(a_h) {
        return Err(Error::AlreadyPlaced(a_h));
    }
    check_choice(state, a_r)?;
    check_choice(state, a_c)?;
    let mut after = apply_placement(state, a_h, a_c)?;
    after.turn_index += 1;
    Ok(StepRecord {
        state_before: state.clone(),
        a_h,
        a_r,
        a_c,
        state_after: after,
    })
}

/// One turn: the robot proposes, the corrector has the final word.
pub fn step_turn(
    state: &WorldState,
    a_h: usize,
    robot_policy: &mut dyn PlacementChooser,
    corrector: &mut dyn PlacementChooser,
) -> Result<StepRecord> {
    if !state.is_unplaced(a_h) {
        return Err(if state.contains_object(a_h) {
            Error::AlreadyPlaced(a_h)
        } else {
            Error::UnknownObject(a_h)
        });
    }
    let vacant = state.vacant_locations();
    if vacant.is_empty() {
        return Err(Error::NoVacancy);
    }
    let a_r = robot_policy.choose(state, a_h, &vacant)?;
    check_choice(state, a_r)?;
    let a_c = corrector.choose(state, a_h, &vacant)?;
    resolve_turn(state, a_h, a_r, a_c)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub spec: EnvironmentSpec,
    pub preference_id: String,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
}

impl Episode {
    /// Plays a full episode: picks come from the seeded pick stream.
    pub fn run(
        spec: &EnvironmentSpec,
        preference_id: impl Into<String>,
        seed: u64,
        robot_policy: &mut dyn PlacementChooser,
        corrector: &mut dyn PlacementChooser,
    ) -> Result<Self> {
        let mut state = new_episode(spec, seed)?;
        let mut picks = pick_rng(seed);
        let mut steps = Vec::with_capacity(spec.num_locations);
        while !state.is_complete() {
            let a_h = random_pick(&state, &mut picks)?;
            let record = step_turn(&state, a_h, robot_policy, corrector)?;
            state = record.state_after.clone();
            steps.push(record);
        }
        Ok(Episode {
            spec: *spec,
            preference_id: preference_id.into(),
            seed,
            steps,
        })
    }

    /// Rebuilds an episode from its action triples, checking every step.
    pub fn from_actions(
        spec: &EnvironmentSpec,
        preference_id: impl Into<String>,
        seed: u64,
        actions: &[[usize; 3]],
    ) -> Result<Self> {
        let mut objects: Vec<usize> = actions.iter().map(|a| a[0]).collect();
        objects.sort_unstable();
        let mut state = WorldState::with_objects(spec, &objects)
            .map_err(|e| Error::MalformedEpisode(e.to_string()))?;
        let mut steps = Vec::with_capacity(actions.len());
        for (t, &[a_h, a_r, a_c]) in actions.iter().enumerate() {
            let record = resolve_turn(&state, a_h, a_r, a_c)
                .map_err(|e| Error::MalformedEpisode(format!("step {t}: {e}")))?;
            state = record.state_after.clone();
            steps.push(record);
        }
        Ok(Episode {
            spec: *spec,
            preference_id: preference_id.into(),
            seed,
            steps,
        })
    }

    pub fn accuracy(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().filter(|s| s.agreed()).count() as f64 / self.steps.len() as f64
    }

    pub fn to_record(&self) -> EpisodeRecord {
        EpisodeRecord {
            spec: self.spec,
            preference_id: self.preference_id.clone(),
            seed: self.seed,
            steps: self.steps.iter().map(StepRecord::actions).collect(),
        }
    }
}

/// Wire form of an [`Episode`]: one JSON object per line in dataset files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRecord {
    pub spec: EnvironmentSpec,
    pub preference_id: String,
    pub seed: u64,
    pub steps: Vec<[usize; 3]>,
}

impl TryFrom<EpisodeRecord> for Episode {
    type Error = Error;

    fn try_from(rec: EpisodeRecord) -> Result<Self> {
        Episode::from_actions(&rec.spec, rec.preference_id, rec.seed, &rec.steps)
    }
}

impl Serialize for Episode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_record().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Episode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = EpisodeRecord::deserialize(d)?;
        Episode::try_from(rec).map_err(serde::de::Error::custom)
    }
}
