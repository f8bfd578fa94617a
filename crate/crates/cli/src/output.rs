//! Artifact writers. Every CSV gets a `.meta.json` sidecar carrying the
//! tool version and the resolved configuration it came from.

use std::path::Path;

use serde::Serialize;

use cbrl_core::analysis::{aggregate_curves, divergence_probe, pca_fit, weight_stats, ProbeConfig};
use cbrl_core::envs::{observation_of, reset, Start};
use cbrl_core::experiments::{
    battery_options, battery_stream, run_test_battery, BatteryOptions, RunRecord, ScenarioConfig, SweepTable, TOOL_VERSION,
};
use cbrl_core::numkit::RngStream;
use cbrl_core::Error;

/// Gate applied before writing principal components.
const PCA_ORTHONORMAL_TOL: f64 = 1e-8;
/// Scales probed by the divergence analysis besides each record's own.
const PROBE_SCALES: [f64; 4] = [0.5, 0.8, 2.2, 5.0];

#[derive(Serialize)]
struct Meta<'a, T: Serialize> {
    tool_version: &'a str,
    #[serde(flatten)]
    body: T,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, body: T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(&Meta { tool_version: TOOL_VERSION, body })?;
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, Error> {
    csv::Writer::from_path(path).map_err(|e| io_err(path, e))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<(), Error> {
    w.flush().map_err(|e| io_err(path, e))
}

fn row<W: std::io::Write>(w: &mut csv::Writer<W>, fields: Vec<String>) -> Result<(), Error> {
    w.write_record(&fields).map_err(|e| Error::Io(e.to_string()))
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    config: &'a ScenarioConfig,
    seeds: Vec<u64>,
}

fn echo(records: &[RunRecord]) -> ConfigEcho<'_> {
    ConfigEcho { config: &records[0].scenario, seeds: records.iter().map(|r| r.seed).collect() }
}

pub fn write_run(dir: &Path, record: &RunRecord) -> Result<(), Error> {
    let seed = record.seed;
    record.write_json(&dir.join(format!("run-seed{seed}.json")))?;
    let echo = ConfigEcho { config: &record.scenario, seeds: vec![seed] };

    let path = dir.join(format!("curve-seed{seed}.csv"));
    let mut w = csv_writer(&path)?;
    row(&mut w, vec!["step".into(), "mean_steps".into(), "reached".into()])?;
    for b in &record.batteries {
        let reached = b.reached.iter().filter(|&&r| r).count();
        row(&mut w, vec![b.step.to_string(), b.mean_steps.to_string(), reached.to_string()])?;
    }
    finish(w, &path)?;
    write_json(&path.with_extension("meta.json"), &echo)?;

    if !record.trajectories.is_empty() {
        let path = dir.join(format!("trajectories-seed{seed}.csv"));
        let mut w = csv_writer(&path)?;
        for r in &record.trajectories {
            w.serialize(r).map_err(|e| io_err(&path, e))?;
        }
        finish(w, &path)?;
        write_json(&path.with_extension("meta.json"), &echo)?;
    }
    if !record.reservoir_traces.is_empty() {
        let path = dir.join(format!("reservoir-seed{seed}.csv"));
        let mut w = csv_writer(&path)?;
        let n = record.reservoir_traces[0].states.first().map(Vec::len).unwrap_or(0);
        let mut header = vec!["battery_step".to_string(), "start_index".into(), "t".into()];
        header.extend((0..n).map(|i| format!("x{i}")));
        row(&mut w, header)?;
        for tr in &record.reservoir_traces {
            for (t, s) in tr.states.iter().enumerate() {
                let mut fields = vec![tr.battery_step.to_string(), tr.start_index.to_string(), t.to_string()];
                fields.extend(s.iter().map(f64::to_string));
                row(&mut w, fields)?;
            }
        }
        finish(w, &path)?;
        write_json(&path.with_extension("meta.json"), &echo)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepMeta<'a> {
    grid: &'a str,
    config: &'a ScenarioConfig,
    seeds: &'a [u64],
    std_convention: &'static str,
    table: &'a SweepTable,
}

pub fn write_sweep(
    dir: &Path,
    grid: &str,
    sc: &ScenarioConfig,
    seeds: &[u64],
    table: &SweepTable,
) -> Result<(), Error> {
    let path = dir.join(format!("sweep-{grid}.csv"));
    let file = std::fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    table.write_csv(file)?;
    write_json(
        &path.with_extension("meta.json"),
        SweepMeta { grid, config: sc, seeds, std_convention: "population", table },
    )
}

pub fn write_curves(dir: &Path, records: &[RunRecord]) -> Result<(), Error> {
    let curves = aggregate_curves(records)?;
    let path = dir.join("curves.csv");
    let mut w = csv_writer(&path)?;
    row(&mut w, vec!["step".into(), "mean_steps".into(), "std_steps".into(), "representative_steps".into()])?;
    for i in 0..curves.steps.len() {
        row(
            &mut w,
            vec![
                curves.steps[i].to_string(),
                curves.mean[i].to_string(),
                curves.std[i].to_string(),
                curves.representative[i].to_string(),
            ],
        )?;
    }
    finish(w, &path)?;
    #[derive(Serialize)]
    struct CurveMeta<'a> {
        #[serde(flatten)]
        echo: ConfigEcho<'a>,
        representative_seed: u64,
        std_convention: &'static str,
    }
    write_json(
        &path.with_extension("meta.json"),
        CurveMeta { echo: echo(records), representative_seed: curves.representative_seed, std_convention: "population" },
    )
}

pub fn write_weights(dir: &Path, records: &[RunRecord]) -> Result<(), Error> {
    let path = dir.join("weights.csv");
    let mut w = csv_writer(&path)?;
    row(&mut w, vec!["g".into(), "seed".into(), "unit".into(), "reservoir_mean_abs".into(), "bypass_mean_abs".into()])?;
    let mut any = false;
    for r in records {
        let Some(readout) = r.policy.readout() else { continue };
        any = true;
        let s = weight_stats(readout);
        for unit in 0..s.bypass_mean_abs.len() {
            row(
                &mut w,
                vec![
                    r.scenario.reservoir.g.to_string(),
                    r.seed.to_string(),
                    unit.to_string(),
                    s.reservoir_mean_abs[unit].to_string(),
                    s.bypass_mean_abs[unit].to_string(),
                ],
            )?;
        }
    }
    finish(w, &path)?;
    if !any {
        return Err(Error::Config("no record has a readout policy".into()));
    }
    write_json(&path.with_extension("meta.json"), echo(records))
}

pub fn write_pca(dir: &Path, records: &[RunRecord], k: usize) -> Result<(), Error> {
    let mut written = 0;
    for r in records {
        if r.reservoir_traces.is_empty() {
            continue;
        }
        let union: Vec<Vec<f64>> = r.reservoir_traces.iter().flat_map(|t| t.states.iter().cloned()).collect();
        let pca = pca_fit(&union, k)?;
        let err = pca.orthonormality_error();
        if err >= PCA_ORTHONORMAL_TOL {
            return Err(Error::Numeric(format!("principal components not orthonormal (error {err:e})")));
        }
        let path = dir.join(format!("pca-seed{}.csv", r.seed));
        let mut w = csv_writer(&path)?;
        let mut header = vec!["episode_tag".to_string(), "step".into()];
        header.extend((1..=k).map(|i| format!("pc{i}")));
        row(&mut w, header)?;
        for tr in &r.reservoir_traces {
            let tag = format!("test{}-start{}", tr.battery_step, tr.start_index);
            for (t, s) in tr.states.iter().enumerate() {
                let mut fields = vec![tag.clone(), t.to_string()];
                fields.extend(pca.project(s).iter().map(f64::to_string));
                row(&mut w, fields)?;
            }
        }
        finish(w, &path)?;
        #[derive(Serialize)]
        struct PcaMeta<'a> {
            config: &'a ScenarioConfig,
            seed: u64,
            explained_variance: &'a [f64],
            explained_ratio: Vec<f64>,
            total_variance: f64,
        }
        write_json(
            &path.with_extension("meta.json"),
            PcaMeta {
                config: &r.scenario,
                seed: r.seed,
                explained_variance: &pca.explained_variance,
                explained_ratio: pca.explained_ratio(),
                total_variance: pca.total_variance,
            },
        )?;
        written += 1;
    }
    if written == 0 {
        return Err(Error::Config("no record contains reservoir traces; train with --dump-reservoir".into()));
    }
    Ok(())
}

pub fn write_divergence(dir: &Path, records: &[RunRecord]) -> Result<(), Error> {
    let path = dir.join("divergence.csv");
    let mut w = csv_writer(&path)?;
    row(&mut w, vec!["seed".into(), "g".into(), "rate".into()])?;
    let mut any = false;
    for r in records {
        let frozen = r.regenerate_frozen()?;
        let Some(params) = frozen.reservoir.as_ref() else { continue };
        any = true;
        // constant input: the observation at the first battery start
        let env = &r.scenario.env;
        let start = env.battery_starts()[0];
        let st = reset(env, env.goal, Start::Fixed(start), &mut RngStream::new(r.seed));
        let u = observation_of(env, &st).to_vec();
        let mut scales = vec![r.scenario.reservoir.g];
        scales.extend(PROBE_SCALES.iter().filter(|&&g| g != r.scenario.reservoir.g));
        for g in scales {
            let mut rng = RngStream::new(r.seed).derive("probe");
            let rate = divergence_probe(params, g, std::slice::from_ref(&u), &ProbeConfig::default(), &mut rng)?;
            row(&mut w, vec![r.seed.to_string(), g.to_string(), rate.to_string()])?;
        }
    }
    finish(w, &path)?;
    if !any {
        return Err(Error::Config("no record uses a reservoir actor".into()));
    }
    write_json(&path.with_extension("meta.json"), echo(records))
}

pub fn write_replay(dir: &Path, record: &RunRecord, step: Option<u64>) -> Result<(), Error> {
    let frozen = record.regenerate_frozen()?;
    let step = step.or_else(|| record.final_battery().map(|b| b.step)).unwrap_or(0);
    let opts = BatteryOptions { trajectories: true, ..battery_options(&record.scenario)? };
    let mut rng = battery_stream(record.seed, step);
    let out = run_test_battery(&record.policy, &frozen, &record.scenario.env, step, &mut rng, &opts)?;
    let battery = out.result.expect("a battery always yields a result");
    let recorded = record.batteries.iter().find(|b| b.step == step);
    let matches = recorded.map(|b| b.steps == battery.steps);
    if matches == Some(false) {
        eprintln!("note: replayed step counts differ from the recorded battery at step {step}");
    }
    let path = dir.join(format!("replay-seed{}.csv", record.seed));
    let mut w = csv_writer(&path)?;
    for r in &out.trajectories {
        w.serialize(r).map_err(|e| io_err(&path, e))?;
    }
    finish(w, &path)?;
    #[derive(Serialize)]
    struct ReplayMeta<'a> {
        config: &'a ScenarioConfig,
        seed: u64,
        battery: &'a cbrl_core::experiments::BatteryResult,
        matches_recorded: Option<bool>,
    }
    write_json(
        &path.with_extension("meta.json"),
        ReplayMeta { config: &record.scenario, seed: record.seed, battery: &battery, matches_recorded: matches },
    )
}
