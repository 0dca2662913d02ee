//! TOML world files.
//!
//! A world file either names a generator or gives the tables verbatim; any
//! table present overrides the generated one. Example:
//!
//! ```toml
//! n_prompts = 2
//! n_responses = 2
//! generator = "dirichlet(0.5), config-table"
//! seed = 7
//! r_star = [[0.1, 0.9], [0.4, 0.6]]
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::world::{build_world, RewardGen, Table, TabularWorld, WorldGenerator};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_prompts: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_responses: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_label: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pi_ref: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_star: Option<Vec<Vec<f64>>>,
}

/// 1-based line of the first `key = ...` assignment in a TOML source.
pub fn line_of_key(source: &str, key: &str) -> Option<usize> {
    source
        .lines()
        .position(|l| {
            let t = l.trim_start();
            t.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
}

pub(crate) fn line_of_offset(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

pub(crate) fn parse_toml<T: serde::de::DeserializeOwned>(source: &str) -> Result<T> {
    toml::from_str(source).map_err(|e| {
        let line = e.span().map(|s| line_of_offset(source, s.start));
        LabError::config(e.message().trim().to_string(), line)
    })
}

impl WorldConfig {
    pub fn parse(source: &str) -> Result<Self> {
        parse_toml(source)
    }

    /// A config holding the world's tables verbatim.
    pub fn from_world(world: &TabularWorld) -> Self {
        Self {
            n_prompts: Some(world.n_prompts()),
            n_responses: Some(world.n_responses()),
            generator: None,
            seed: None,
            rho: Some(world.rho().to_vec()),
            rho_label: Some(world.rho_label().to_vec()),
            pi_ref: Some(world.pi_ref().to_rows()),
            r_star: Some(world.r_star().to_rows()),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::config(e.to_string(), None))
    }

    /// Builds the world; `source` is used to attach line numbers to errors.
    pub fn resolve(&self, source: Option<&str>) -> Result<TabularWorld> {
        let line = |key: &str| source.and_then(|s| line_of_key(s, key));
        let n_prompts = self
            .n_prompts
            .or(self.rho.as_ref().map(Vec::len))
            .or(self.pi_ref.as_ref().map(Vec::len))
            .or(self.r_star.as_ref().map(Vec::len));
        let n_responses = self
            .n_responses
            .or(self.pi_ref.as_ref().and_then(|t| t.first().map(Vec::len)))
            .or(self.r_star.as_ref().and_then(|t| t.first().map(Vec::len)));

        let (Some(n_prompts), Some(n_responses)) = (n_prompts, n_responses) else {
            return Err(LabError::config("cannot infer world dimensions", None));
        };

        let base = match &self.generator {
            Some(g) => {
                let mut gen: WorldGenerator = g
                    .parse()
                    .map_err(|e: LabError| e.at_line(line("generator")))?;
                if gen.rewards == RewardGen::ConfigTable {
                    if self.r_star.is_none() {
                        return Err(
                            LabError::world("r_star", "required by config-table rewards")
                                .at_line(line("generator")),
                        );
                    }
                    gen.rewards = RewardGen::Uniform;
                }
                let seed = self.seed.unwrap_or(0);
                let w = build_world(n_prompts, n_responses, &gen, seed)
                    .map_err(|e| e.at_line(line("n_prompts").or(line("generator"))))?;
                Some(w)
            }
            None => None,
        };

        let table =
            |key: &str, rows: &Option<Vec<Vec<f64>>>, fallback: Option<&Table>| -> Result<Table> {
                match rows {
                    Some(r) => {
                        if r.len() != n_prompts || r.iter().any(|row| row.len() != n_responses) {
                            return Err(LabError::world(
                                key,
                                format!("must be {n_prompts}x{n_responses}"),
                            )
                            .at_line(line(key)));
                        }
                        Table::from_rows(r.clone()).map_err(|e| e.at_line(line(key)))
                    }
                    None => fallback
                        .cloned()
                        .ok_or_else(|| LabError::world(key, "missing and no generator given")),
                }
            };
        let vector =
            |key: &str, v: &Option<Vec<f64>>, fallback: Option<&[f64]>| -> Result<Vec<f64>> {
                match v {
                    Some(v) if v.len() != n_prompts => Err(LabError::world(
                        key,
                        format!("must have {n_prompts} entries"),
                    )
                    .at_line(line(key))),
                    Some(v) => Ok(v.clone()),
                    None => fallback
                        .map(<[f64]>::to_vec)
                        .ok_or_else(|| LabError::world(key, "missing and no generator given")),
                }
            };

        let rho = vector("rho", &self.rho, base.as_ref().map(TabularWorld::rho))?;
        let rho_label = vector(
            "rho_label",
            &self.rho_label,
            base.as_ref().map(TabularWorld::rho_label),
        )?;
        let pi_ref = table(
            "pi_ref",
            &self.pi_ref,
            base.as_ref().map(TabularWorld::pi_ref),
        )?;
        let r_star = table(
            "r_star",
            &self.r_star,
            base.as_ref().map(TabularWorld::r_star),
        )?;

        TabularWorld::new(rho, rho_label, pi_ref, r_star).map_err(|e| match &e {
            LabError::InvalidWorld { field, .. } => {
                let at = line(field);
                e.at_line(at)
            }
            _ => e,
        })
    }
}

/// Parses and resolves a world file in one step.
pub fn load_world(source: &str) -> Result<TabularWorld> {
    WorldConfig::parse(source)?.resolve(Some(source))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_form() {
        let src = "n_prompts = 3\nn_responses = 4\ngenerator = \"dirichlet(1.0), uniform-reward\"\nseed = 7\n";
        let w = load_world(src).unwrap();
        let direct = build_world(3, 4, &WorldGenerator::dirichlet(1.0), 7).unwrap();
        assert_eq!(w, direct);
    }

    #[test]
    fn unnormalised_rho_reports_line() {
        let src = "rho = [0.5, 0.4]\nrho_label = [0.5, 0.5]\npi_ref = [[0.5, 0.5], [0.5, 0.5]]\nr_star = [[0.1, 0.2], [0.3, 0.4]]\n";
        let err = load_world(src).unwrap_err();
        assert!(
            err.to_string()
                .starts_with("invalid world: rho not normalised"),
            "{err}"
        );
        assert!(matches!(err, LabError::InvalidWorld { line: Some(1), .. }));
    }

    #[test]
    fn reward_out_of_range_reports_line() {
        let src = "rho = [0.5, 0.5]\nrho_label = [0.5, 0.5]\npi_ref = [[0.5, 0.5], [0.5, 0.5]]\n\nr_star = [[0.1, 1.2], [0.3, 0.4]]\n";
        let err = load_world(src).unwrap_err();
        assert!(
            matches!(err, LabError::InvalidWorld { line: Some(5), .. }),
            "{err}"
        );
    }

    #[test]
    fn syntax_error_reports_line() {
        let src = "n_prompts = 2\nn_responses = \ngenerator = \"uniform-all\"\n";
        let err = load_world(src).unwrap_err();
        assert!(
            matches!(err, LabError::InvalidConfig { line: Some(2), .. }),
            "{err}"
        );
    }

    #[test]
    fn unknown_key_rejected() {
        let err =
            load_world("n_prompts = 2\nn_responses = 2\ngenrator = \"uniform-all\"\n").unwrap_err();
        assert!(
            matches!(err, LabError::InvalidConfig { line: Some(3), .. }),
            "{err}"
        );
    }

    #[test]
    fn config_table_rewards_override() {
        let src = "n_prompts = 2\nn_responses = 2\ngenerator = \"uniform, config-table\"\nr_star = [[0.1, 0.9], [0.4, 0.6]]\n";
        let w = load_world(src).unwrap();
        assert_eq!(w.r_star().row(0), &[0.1, 0.9]);
        assert_eq!(w.rho(), &[0.5, 0.5]);
        let missing = "n_prompts = 2\nn_responses = 2\ngenerator = \"uniform, config-table\"\n";
        assert!(load_world(missing).is_err());
    }

    #[test]
    fn written_config_reloads_verbatim() {
        let w = build_world(3, 5, &WorldGenerator::dirichlet(0.5), 11).unwrap();
        let text = WorldConfig::from_world(&w).to_toml().unwrap();
        assert_eq!(load_world(&text).unwrap(), w);
    }
}
