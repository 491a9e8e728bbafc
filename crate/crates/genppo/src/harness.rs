//! Paired comparison of standard and upgraded PPO: same seeds, same
//! environments, same evaluation schedule, only the loss differs. Emits a
//! CSV of per-checkpoint means with standard errors and a deterministic SVG
//! chart with shaded error bands.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forge::ranges_disjoint;
use crate::grid::{GridSpec, NoiseConfig, Variant};
use crate::ppo::{train, EvalSchedule, GenScore, PpoConfig, PpoError};
use crate::predictor::{GenLossHook, PredictorArtifact, PredictorError};
use crate::rng::mix_seed;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("seed collision: {0}")]
    SeedCollision(String),
    #[error("invalid compare config: {0}")]
    InvalidConfig(String),
    #[error("report input is empty")]
    EmptyInput,
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Trainer(#[from] PpoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Standard,
    Upgraded,
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Standard => "standard",
            Arm::Upgraded => "upgraded",
        }
    }
}

/// A named half-open seed range reserved by an earlier pipeline stage; the
/// comparison refuses seeds that collide with any of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedRange {
    pub name: String,
    pub start: u64,
    pub count: u64,
}

/// Comparison parameters. Agent `i` in both arms trains on environment seed
/// `train_seed_base + i` with identical initialization and sampling streams;
/// evaluation uses `eval_seed_base + j` with observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub n_agents: usize,
    pub total_steps: u64,
    pub eval_every: u64,
    pub n_eval_envs: usize,
    pub c3: f64,
    pub variant: Variant,
    pub train_seed_base: u64,
    pub eval_seed_base: u64,
    pub noise: NoiseConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    /// Seed ranges already used elsewhere (forge training, predictor
    /// evaluation); checked for disjointness at startup.
    #[serde(default)]
    pub reserved_ranges: Vec<NamedRange>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            n_agents: 10,
            total_steps: 200_000,
            eval_every: 5_000,
            n_eval_envs: 100,
            c3: 0.5,
            variant: Variant::Crossing,
            train_seed_base: 2_000_000,
            eval_seed_base: 3_000_000,
            noise: NoiseConfig { amplitude: 0.05, seed: 616_161 },
            ppo: PpoConfig::default(),
            reserved_ranges: Vec::new(),
        }
    }
}

impl CompareConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n_agents == 0 || self.n_eval_envs == 0 {
            return Err(HarnessError::InvalidConfig("n_agents and n_eval_envs must be >= 1".into()));
        }
        if self.eval_every == 0 || self.total_steps < self.eval_every {
            return Err(HarnessError::InvalidConfig(
                "eval_every must be in (0, total_steps]".into(),
            ));
        }
        let mut pools: Vec<(String, (u64, u64))> = vec![
            ("compare-train".into(), (self.train_seed_base, self.n_agents as u64)),
            ("compare-eval".into(), (self.eval_seed_base, self.n_eval_envs as u64)),
        ];
        for r in &self.reserved_ranges {
            pools.push((r.name.clone(), (r.start, r.count)));
        }
        for i in 0..pools.len() {
            for j in i + 1..pools.len() {
                if !ranges_disjoint(pools[i].1, pools[j].1) {
                    return Err(HarnessError::SeedCollision(format!(
                        "{} {:?} overlaps {} {:?}",
                        pools[i].0, pools[i].1, pools[j].0, pools[j].1
                    )));
                }
            }
        }
        self.ppo.validate()?;
        Ok(())
    }

    fn eval_specs(&self) -> Vec<GridSpec> {
        (0..self.n_eval_envs)
            .map(|j| GridSpec {
                seed: self.eval_seed_base + j as u64,
                variant: self.variant,
                ..GridSpec::default()
            })
            .collect()
    }
}

/// One aggregated point of the comparison curves.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub arm: Arm,
    pub mean_zeta: f64,
    pub stderr: f64,
    pub n: usize,
}

/// One agent's evaluation trajectory in one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentCurve {
    pub agent_index: usize,
    pub arm: Arm,
    pub points: Vec<(u64, f64)>,
}

/// Paired sign test at the final checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub upgraded_wins: usize,
    pub ties: usize,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct CompareOutput {
    pub points: Vec<CurvePoint>,
    pub per_agent: Vec<AgentCurve>,
    pub sign_test: SignTest,
}

/// Runs both arms for every agent and aggregates the curves. Jobs execute on
/// the current rayon pool; per-agent seed streams make the result identical
/// for any worker count.
pub fn compare(
    config: &CompareConfig,
    artifact: &PredictorArtifact,
) -> Result<CompareOutput, HarnessError> {
    config.validate()?;
    let hook = GenLossHook::new(artifact.clone())?;
    let eval = EvalSchedule {
        every_steps: config.eval_every,
        specs: config.eval_specs(),
        noise: Some(config.noise),
        episodes_per_env: 1,
    };

    let jobs: Vec<(usize, Arm)> = (0..config.n_agents)
        .flat_map(|i| [(i, Arm::Standard), (i, Arm::Upgraded)])
        .collect();
    let curves: Vec<Result<AgentCurve, HarnessError>> = jobs
        .par_iter()
        .map(|&(agent_index, arm)| {
            let spec = GridSpec {
                seed: config.train_seed_base + agent_index as u64,
                variant: config.variant,
                ..GridSpec::default()
            };
            // Pairing: both arms share the agent's seed stream; only the
            // loss differs.
            let cfg = PpoConfig {
                c3: match arm {
                    Arm::Standard => 0.0,
                    Arm::Upgraded => config.c3,
                },
                seed: mix_seed(config.train_seed_base, agent_index as u64),
                ..config.ppo.clone()
            };
            let hook_ref: Option<&dyn GenScore> = match arm {
                Arm::Standard => None,
                Arm::Upgraded => Some(&hook),
            };
            let result = train(&spec, &cfg, hook_ref, config.total_steps, Some(&eval))?;
            let points: Vec<(u64, f64)> = result
                .log
                .iter()
                .filter_map(|row| row.zeta.map(|z| (row.step, z)))
                .collect();
            Ok(AgentCurve { agent_index, arm, points })
        })
        .collect();
    let per_agent: Vec<AgentCurve> = curves.into_iter().collect::<Result<_, _>>()?;

    let points = aggregate_curves(&per_agent);
    let sign_test = paired_sign_test(&per_agent);
    Ok(CompareOutput { points, per_agent, sign_test })
}

/// Mean and standard error across agents per (step, arm). With a single
/// agent the standard error is 0 by convention (flagged in the report).
pub fn aggregate_curves(per_agent: &[AgentCurve]) -> Vec<CurvePoint> {
    let mut steps: Vec<u64> = per_agent
        .iter()
        .flat_map(|c| c.points.iter().map(|(s, _)| *s))
        .collect();
    steps.sort_unstable();
    steps.dedup();

    let mut out = Vec::new();
    for &step in &steps {
        for arm in [Arm::Standard, Arm::Upgraded] {
            let values: Vec<f64> = per_agent
                .iter()
                .filter(|c| c.arm == arm)
                .flat_map(|c| c.points.iter().filter(|(s, _)| *s == step).map(|(_, z)| *z))
                .collect();
            if values.is_empty() {
                continue;
            }
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let stderr = if n < 2 {
                0.0
            } else {
                let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / (n - 1) as f64;
                (var / n as f64).sqrt()
            };
            out.push(CurvePoint { step, arm, mean_zeta: mean, stderr, n });
        }
    }
    out
}

/// Counts agents whose upgraded arm beats their standard arm at the final
/// shared checkpoint.
pub fn paired_sign_test(per_agent: &[AgentCurve]) -> SignTest {
    let final_zeta = |agent: usize, arm: Arm| -> Option<f64> {
        per_agent
            .iter()
            .find(|c| c.agent_index == agent && c.arm == arm)
            .and_then(|c| c.points.last().map(|(_, z)| *z))
    };
    let agents: std::collections::BTreeSet<usize> =
        per_agent.iter().map(|c| c.agent_index).collect();
    let mut wins = 0;
    let mut ties = 0;
    let mut n = 0;
    for agent in agents {
        if let (Some(s), Some(u)) = (final_zeta(agent, Arm::Standard), final_zeta(agent, Arm::Upgraded))
        {
            n += 1;
            if u > s {
                wins += 1;
            } else if u == s {
                ties += 1;
            }
        }
    }
    SignTest { upgraded_wins: wins, ties, n }
}

/// Writes `curves.csv`, `curves.svg` and `per_agent/*.csv`. Outputs are a
/// pure function of the input; re-emitting the same output is byte-identical.
pub fn emit_report(output: &CompareOutput, out_dir: &Path) -> Result<(), HarnessError> {
    if output.points.is_empty() {
        return Err(HarnessError::EmptyInput);
    }
    std::fs::create_dir_all(out_dir)?;

    let mut csv = String::new();
    csv.push_str(&format!(
        "# sign_test: upgraded_wins={} ties={} n={}\n",
        output.sign_test.upgraded_wins, output.sign_test.ties, output.sign_test.n
    ));
    if output.points.iter().any(|p| p.n == 1) {
        csv.push_str("# warning: stderr degenerate (n=1)\n");
    }
    csv.push_str("step,arm,mean_zeta,stderr,n\n");
    for p in &output.points {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            p.step,
            p.arm.as_str(),
            p.mean_zeta,
            p.stderr,
            p.n
        ));
    }
    std::fs::write(out_dir.join("curves.csv"), csv)?;

    std::fs::write(out_dir.join("curves.svg"), render_svg(&output.points))?;

    let agent_dir = out_dir.join("per_agent");
    std::fs::create_dir_all(&agent_dir)?;
    for curve in &output.per_agent {
        let mut body = String::from("step,zeta\n");
        for (step, zeta) in &curve.points {
            body.push_str(&format!("{step},{zeta}\n"));
        }
        let name = format!("{}_{:03}.csv", curve.arm.as_str(), curve.agent_index);
        std::fs::write(agent_dir.join(name), body)?;
    }
    Ok(())
}

/// Chart geometry shared by the renderer and the parse-back tests.
pub mod svg_geom {
    pub const WIDTH: f64 = 800.0;
    pub const HEIGHT: f64 = 500.0;
    pub const LEFT: f64 = 60.0;
    pub const RIGHT: f64 = 780.0;
    pub const TOP: f64 = 20.0;
    pub const BOTTOM: f64 = 460.0;

    pub fn x(step: u64, max_step: u64) -> f64 {
        LEFT + (RIGHT - LEFT) * step as f64 / max_step.max(1) as f64
    }

    pub fn y(zeta: f64) -> f64 {
        BOTTOM - (BOTTOM - TOP) * zeta
    }

    /// Vertical pixels per unit of zeta.
    pub fn y_scale() -> f64 {
        BOTTOM - TOP
    }
}

fn render_svg(points: &[CurvePoint]) -> String {
    use svg_geom::*;
    let max_step = points.iter().map(|p| p.step).max().unwrap_or(1);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));

    // Axes with zeta ticks every 0.25.
    svg.push_str(&format!(
        "<line x1=\"{LEFT}\" y1=\"{BOTTOM}\" x2=\"{RIGHT}\" y2=\"{BOTTOM}\" stroke=\"black\"/>\n"
    ));
    svg.push_str(&format!(
        "<line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{BOTTOM}\" stroke=\"black\"/>\n"
    ));
    for i in 0..=4 {
        let z = i as f64 * 0.25;
        let yy = y(z);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{yy}\" x2=\"{LEFT}\" y2=\"{yy}\" stroke=\"black\"/>\n",
            LEFT - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{z}</text>\n",
            LEFT - 8.0,
            yy + 4.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">steps</text>\n",
        (LEFT + RIGHT) / 2.0,
        HEIGHT - 8.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{max_step}</text>\n",
        RIGHT,
        BOTTOM + 16.0
    ));

    for (arm, color) in [(Arm::Standard, "#2e8b57"), (Arm::Upgraded, "#7b2fbe")] {
        let arm_points: Vec<&CurvePoint> = points.iter().filter(|p| p.arm == arm).collect();
        if arm_points.is_empty() {
            continue;
        }
        // Shaded band: upper edge left to right, lower edge back.
        let mut band = String::new();
        for p in &arm_points {
            band.push_str(&format!("{},{} ", x(p.step, max_step), y(p.mean_zeta + p.stderr)));
        }
        for p in arm_points.iter().rev() {
            band.push_str(&format!("{},{} ", x(p.step, max_step), y(p.mean_zeta - p.stderr)));
        }
        svg.push_str(&format!(
            "<polygon class=\"band-{}\" points=\"{}\" fill=\"{color}\" fill-opacity=\"0.2\" stroke=\"none\"/>\n",
            arm.as_str(),
            band.trim_end()
        ));

        let mut line = String::new();
        for p in &arm_points {
            line.push_str(&format!("{},{} ", x(p.step, max_step), y(p.mean_zeta)));
        }
        svg.push_str(&format!(
            "<polyline class=\"line-{}\" points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            arm.as_str(),
            line.trim_end()
        ));
        let label_y = match arm {
            Arm::Standard => 35.0,
            Arm::Upgraded => 52.0,
        };
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{label_y}\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            LEFT + 10.0,
            arm.as_str()
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
