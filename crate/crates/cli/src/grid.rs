//! Scenario grid expansion and the three named evaluation tracks.

use csi4cast_core::{ChannelProfile, Error, NoiseType, Result, ScenarioDescriptor, SnrMode};

use crate::config::{NoisePoint, RunConfig};

/// Factor lists for one named track. Values are config-file fragments so
/// presets stay printable and diffable.
struct Preset {
    velocities: &'static str,
    spreads_ns: &'static str,
    profiles: &'static str,
    awgn: &'static str,
    phase: &'static str,
    burst: &'static str,
    drops: &'static str,
}

/// The training grid of 27 cells evaluated under six AWGN levels.
const REGULAR: Preset = Preset {
    velocities: "1,10,30",
    spreads_ns: "30,100,300",
    profiles: "nlos-a,nlos-c,los-d",
    awgn: "0,5,10,15,20,25",
    phase: "",
    burst: "",
    drops: "",
};

/// The same 27 cells under structured corruptions instead of AWGN.
const ROBUSTNESS: Preset = Preset {
    velocities: "1,10,30",
    spreads_ns: "30,100,300",
    profiles: "nlos-a,nlos-c,los-d",
    awgn: "",
    phase: "10,15,20,25",
    burst: "10,15,20,25",
    drops: "0.01,0.02,0.03,0.04,0.05,0.06,0.07,0.08,0.09,0.10",
};

/// Extended factor ranges: unseen profiles, spreads, and velocities
/// around the training values, still under AWGN.
const GENERALIZATION: Preset = Preset {
    velocities: "1,3,6,9,10,12,15,18,21,24,27,30,33,36,39,42,45",
    spreads_ns: "30,50,100,200,300,400",
    profiles: "nlos-a,nlos-b,nlos-c,los-d,los-e",
    awgn: "0,5,10,15,20,25",
    phase: "",
    burst: "",
    drops: "",
};

fn preset(name: &str) -> Result<Option<&'static Preset>> {
    match name {
        "none" => Ok(None),
        "regular" => Ok(Some(&REGULAR)),
        "robustness" => Ok(Some(&ROBUSTNESS)),
        "generalization" => Ok(Some(&GENERALIZATION)),
        other => Err(Error::InvalidConfig(format!("unknown preset '{other}'"))),
    }
}

/// Apply the preset named by `data.preset` to the grid keys, leaving
/// everything else untouched. A no-op for `none`.
pub fn apply_preset(cfg: &mut RunConfig) -> Result<()> {
    let Some(p) = preset(cfg.get("data.preset"))? else {
        return Ok(());
    };
    cfg.set("data.velocities_mps", p.velocities)?;
    cfg.set("data.delay_spreads_ns", p.spreads_ns)?;
    cfg.set("data.profiles", p.profiles)?;
    cfg.set("data.awgn_snrs_db", p.awgn)?;
    cfg.set("data.phase_snrs_db", p.phase)?;
    cfg.set("data.burst_snrs_db", p.burst)?;
    cfg.set("data.drop_rates", p.drops)?;
    cfg.set("data.clean", "false")?;
    Ok(())
}

/// The noise axis of the grid. Test mode enumerates every configured
/// (type, degree) pair; train mode collapses to a single AWGN point
/// whose per-sample SNR is drawn from the configured range.
pub fn noise_points(cfg: &RunConfig) -> Result<Vec<NoisePoint>> {
    if cfg.get("data.mode") == "train" {
        let lo = cfg.f64_of("data.train_snr_lo_db")?;
        let hi = cfg.f64_of("data.train_snr_hi_db")?;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidConfig(format!(
                "train SNR range [{lo}, {hi}] is not an ordered finite interval"
            )));
        }
        return Ok(vec![NoisePoint { noise: NoiseType::Awgn, degree: (lo + hi) / 2.0 }]);
    }
    let mut points = Vec::new();
    if cfg.bool_of("data.clean")? {
        points.push(NoisePoint { noise: NoiseType::None, degree: 0.0 });
    }
    for (key, noise) in [
        ("data.awgn_snrs_db", NoiseType::Awgn),
        ("data.phase_snrs_db", NoiseType::Phase),
        ("data.burst_snrs_db", NoiseType::Burst),
        ("data.drop_rates", NoiseType::PacketDrop),
    ] {
        for degree in cfg.f64_list(key)? {
            points.push(NoisePoint { noise, degree });
        }
    }
    if points.is_empty() {
        return Err(Error::InvalidConfig(
            "scenario grid has no noise settings; set a degree list or data.clean = true".into(),
        ));
    }
    Ok(points)
}

/// How per-sample SNR degrees are assigned for the configured mode.
pub fn snr_mode(cfg: &RunConfig) -> Result<SnrMode> {
    match cfg.get("data.mode") {
        "test" => Ok(SnrMode::Fixed),
        "train" => Ok(SnrMode::UniformRange {
            lo_db: cfg.f64_of("data.train_snr_lo_db")?,
            hi_db: cfg.f64_of("data.train_snr_hi_db")?,
        }),
        other => Err(Error::InvalidConfig(format!("data.mode: expected test or train, got '{other}'"))),
    }
}

/// Cartesian product of the factor lists, honoring `data.preset`. The
/// order is velocity-major, then spread, profile, and noise point, which
/// fixes dataset file numbering.
pub fn scenario_grid(cfg: &RunConfig) -> Result<Vec<ScenarioDescriptor>> {
    let mut cfg = cfg.clone();
    apply_preset(&mut cfg)?;
    let velocities = cfg.f64_list("data.velocities_mps")?;
    let spreads_ns = cfg.f64_list("data.delay_spreads_ns")?;
    let profiles: Vec<ChannelProfile> = cfg.profile_list("data.profiles")?;
    let noise = noise_points(&cfg)?;
    let duplex = cfg.system()?.duplex;
    if velocities.is_empty() || spreads_ns.is_empty() || profiles.is_empty() {
        return Err(Error::InvalidConfig(
            "scenario grid needs at least one velocity, delay spread, and profile".into(),
        ));
    }
    let mut grid = Vec::with_capacity(velocities.len() * spreads_ns.len() * profiles.len() * noise.len());
    for &v in &velocities {
        for &s_ns in &spreads_ns {
            for &profile in &profiles {
                for point in &noise {
                    let scenario = ScenarioDescriptor {
                        velocity_mps: v,
                        delay_spread_s: s_ns * 1e-9,
                        profile,
                        noise: point.noise,
                        noise_degree: point.degree,
                        duplex,
                    };
                    scenario.validate()?;
                    grid.push(scenario);
                }
            }
        }
    }
    Ok(grid)
}
