//! Synthetic interaction data from a known causal process.
//!
//! Each record draws one latent state per interest; every feature field is
//! owned by exactly one interest and emits a code from a state-conditioned
//! lookup table; the click is a Bernoulli draw on a weighted sum of
//! per-interest state utilities. Because the generating process is explicit,
//! interventions (changing one interest's state prior or click weight)
//! produce controlled distribution shifts that leave the other interests'
//! feature marginals untouched.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureSchema, FieldSpec, InteractionRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    /// Number of latent interests driving clicks.
    pub n_interests: usize,
    /// Observed feature fields, excluding the user id field.
    pub n_feature_fields: usize,
    pub field_cardinality: usize,
    /// Latent states per interest.
    pub n_states: usize,
    pub n_users: usize,
    /// Additive logit offset controlling the base click rate.
    pub bias: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_interests: 4,
            n_feature_fields: 8,
            field_cardinality: 6,
            n_states: 3,
            n_users: 300,
            bias: -0.2,
        }
    }
}

/// Fully specified generating process. Serializable so a run can record the
/// exact world it sampled from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalWorld {
    pub schema: FeatureSchema,
    pub n_states: usize,
    /// Owning interest per schema field; `None` for the user field.
    pub owner: Vec<Option<usize>>,
    /// State distribution per interest.
    pub priors: Vec<Vec<f64>>,
    /// Code distribution per schema field and state; empty for the user field.
    pub emissions: Vec<Vec<Vec<f64>>>,
    /// Per-interest, per-state contribution to the click logit.
    pub utilities: Vec<Vec<f64>>,
    pub click_weights: Vec<f64>,
    pub bias: f64,
}

/// Replacement parameters for one interest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub target: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_prior: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_click_weight: Option<f64>,
}

impl Intervention {
    /// Negate the target interest's click weight: its features keep the same
    /// marginal distribution but their relationship to the label inverts.
    pub fn flip_click_weight(world: &CausalWorld, target: usize) -> Intervention {
        Intervention {
            target,
            new_prior: None,
            new_click_weight: Some(-world.click_weights[target]),
        }
    }
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= s;
    }
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl CausalWorld {
    pub fn n_interests(&self) -> usize {
        self.priors.len()
    }

    /// Schema field indices owned by an interest, ascending.
    pub fn fields_of(&self, interest: usize) -> Vec<usize> {
        self.owner
            .iter()
            .enumerate()
            .filter(|(_, o)| **o == Some(interest))
            .map(|(f, _)| f)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        let m = self.n_interests();
        if m < 2 {
            return Err(Error::Config(format!(
                "world needs at least 2 interests, got {m}"
            )));
        }
        if self.utilities.len() != m || self.click_weights.len() != m {
            return Err(Error::Config("world: interest arrays disagree in length".into()));
        }
        if self.owner.len() != self.schema.n_fields()
            || self.emissions.len() != self.schema.n_fields()
        {
            return Err(Error::Config("world: per-field arrays disagree with schema".into()));
        }
        for i in 0..m {
            if self.priors[i].len() != self.n_states || self.utilities[i].len() != self.n_states {
                return Err(Error::Config(format!(
                    "world: interest {i} state arrays disagree with n_states {}",
                    self.n_states
                )));
            }
            if self.fields_of(i).is_empty() {
                return Err(Error::Config(format!("world: interest {i} owns no fields")));
            }
        }
        for (f, owner) in self.owner.iter().enumerate() {
            match owner {
                None => {
                    if f != self.schema.user_field {
                        return Err(Error::Config(format!("world: field {f} has no owner")));
                    }
                }
                Some(_) => {
                    let card = self.schema.fields[f].cardinality;
                    if self.emissions[f].len() != self.n_states
                        || self.emissions[f].iter().any(|row| row.len() != card)
                    {
                        return Err(Error::Config(format!(
                            "world: emission table for field {f} has wrong shape"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn check_intervention(&self, iv: &Intervention) -> Result<()> {
        if iv.target >= self.n_interests() {
            return Err(Error::Config(format!(
                "intervention target {} out of range for {} interests",
                iv.target,
                self.n_interests()
            )));
        }
        if let Some(p) = &iv.new_prior {
            if p.len() != self.n_states {
                return Err(Error::Config(format!(
                    "intervention prior has {} states, world has {}",
                    p.len(),
                    self.n_states
                )));
            }
            let s: f64 = p.iter().sum();
            if p.iter().any(|&x| x < 0.0) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::Config(
                    "intervention prior must be a probability vector".into(),
                ));
            }
        }
        if iv.new_prior.is_none() && iv.new_click_weight.is_none() {
            return Err(Error::Config("intervention changes nothing".into()));
        }
        Ok(())
    }
}

/// Draw a random world: near-equal contiguous field groups, jittered state
/// priors, band-structured emissions (state s concentrates on the s-th slice
/// of the code range), monotone state utilities and positive click weights.
pub fn sample_world(cfg: &WorldConfig, seed: u64) -> Result<CausalWorld> {
    if cfg.n_interests < 2 {
        return Err(Error::Config(format!(
            "world config: n_interests must be at least 2, got {}",
            cfg.n_interests
        )));
    }
    if cfg.n_feature_fields < cfg.n_interests {
        return Err(Error::Config(format!(
            "world config: {} feature fields cannot cover {} interests",
            cfg.n_feature_fields, cfg.n_interests
        )));
    }
    if cfg.n_states < 2 {
        return Err(Error::Config("world config: n_states must be at least 2".into()));
    }
    if cfg.field_cardinality < cfg.n_states {
        return Err(Error::Config(format!(
            "world config: field cardinality {} below n_states {}",
            cfg.field_cardinality, cfg.n_states
        )));
    }
    if cfg.n_users < 2 {
        return Err(Error::Config("world config: n_users must be at least 2".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fields = vec![FieldSpec {
        name: "user".into(),
        cardinality: cfg.n_users,
    }];
    for f in 0..cfg.n_feature_fields {
        fields.push(FieldSpec {
            name: format!("f{f}"),
            cardinality: cfg.field_cardinality,
        });
    }
    let schema = FeatureSchema::new(fields, 0)?;

    let mut owner = vec![None];
    for f in 0..cfg.n_feature_fields {
        owner.push(Some(f * cfg.n_interests / cfg.n_feature_fields));
    }

    let mut priors = Vec::with_capacity(cfg.n_interests);
    let mut utilities = Vec::with_capacity(cfg.n_interests);
    let mut click_weights = Vec::with_capacity(cfg.n_interests);
    for _ in 0..cfg.n_interests {
        let mut p: Vec<f64> = (0..cfg.n_states)
            .map(|_| 1.0 + rng.gen_range(-0.3..0.3))
            .collect();
        normalize(&mut p);
        priors.push(p);
        let scale = rng.gen_range(0.9..1.1);
        let u: Vec<f64> = (0..cfg.n_states)
            .map(|s| {
                let base = if cfg.n_states == 1 {
                    0.0
                } else {
                    -1.0 + 2.0 * s as f64 / (cfg.n_states - 1) as f64
                };
                base * scale + rng.gen_range(-0.05..0.05)
            })
            .collect();
        utilities.push(u);
        click_weights.push(rng.gen_range(0.8..1.2));
    }

    let mut emissions = vec![Vec::new()];
    for _ in 0..cfg.n_feature_fields {
        let mut table = Vec::with_capacity(cfg.n_states);
        for s in 0..cfg.n_states {
            let band_lo = s * cfg.field_cardinality / cfg.n_states;
            let band_hi = (s + 1) * cfg.field_cardinality / cfg.n_states;
            let in_band_mass = rng.gen_range(0.8..0.9);
            let band_len = (band_hi - band_lo) as f64;
            let rest_len = (cfg.field_cardinality - (band_hi - band_lo)) as f64;
            let mut row: Vec<f64> = (0..cfg.field_cardinality)
                .map(|c| {
                    let base = if c >= band_lo && c < band_hi {
                        in_band_mass / band_len
                    } else {
                        (1.0 - in_band_mass) / rest_len
                    };
                    base * (1.0 + rng.gen_range(-0.1..0.1))
                })
                .collect();
            normalize(&mut row);
            table.push(row);
        }
        emissions.push(table);
    }

    let world = CausalWorld {
        schema,
        n_states: cfg.n_states,
        owner,
        priors,
        emissions,
        utilities,
        click_weights,
        bias: cfg.bias,
    };
    world.validate()?;
    Ok(world)
}

/// Sample `n` interaction records, optionally under an intervention.
///
/// Each record uses its own counter-indexed RNG stream, so record `i` is
/// identical whether the call asks for `i + 1` or a million records, and the
/// per-record draw order (user, states, field codes, label) is fixed.
pub fn sample_dataset(
    world: &CausalWorld,
    n: usize,
    intervention: Option<&Intervention>,
    seed: u64,
) -> Result<Dataset> {
    world.validate()?;
    if let Some(iv) = intervention {
        world.check_intervention(iv)?;
    }
    let m = world.n_interests();
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let user = rng.gen_range(0..world.schema.fields[world.schema.user_field].cardinality) as u32;

        let mut states = Vec::with_capacity(m);
        for interest in 0..m {
            let prior = match intervention {
                Some(iv) if iv.target == interest && iv.new_prior.is_some() => {
                    iv.new_prior.as_ref().unwrap()
                }
                _ => &world.priors[interest],
            };
            states.push(sample_categorical(&mut rng, prior));
        }

        let mut features = Vec::with_capacity(world.schema.n_fields());
        for f in 0..world.schema.n_fields() {
            match world.owner[f] {
                None => features.push(user),
                Some(interest) => {
                    let table = &world.emissions[f][states[interest]];
                    features.push(sample_categorical(&mut rng, table) as u32);
                }
            }
        }

        let mut logit = world.bias;
        for interest in 0..m {
            let w = match intervention {
                Some(iv) if iv.target == interest && iv.new_click_weight.is_some() => {
                    iv.new_click_weight.unwrap()
                }
                _ => world.click_weights[interest],
            };
            logit += w * world.utilities[interest][states[interest]];
        }
        let label = (rng.gen_range(0.0..1.0) < sigmoid(logit)) as u8;
        records.push(InteractionRecord::new(features, label));
    }
    let ds = Dataset::new(world.schema.clone(), records).named(format!(
        "synth{}",
        if intervention.is_some() { "[intervened]" } else { "" }
    ));
    ds.validate()?;
    Ok(ds)
}
