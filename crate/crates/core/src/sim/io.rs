//! File formats: workload configs (key-value text), query specs (JSON
//! lines) and traces (a JSON header line followed by one snapshot per line).

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{CounterSnapshot, CostProfile, QuerySpec, SimError, Span, Template, Trace, Truth, WorkloadConfig};
use crate::plan::{Pipeline, Plan};

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn parse_mix(value: &str) -> Result<Vec<(Template, f64)>, SimError> {
    let mut out = Vec::new();
    for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, weight) = match part.split_once(':') {
            Some((n, w)) => (n.trim(), w.trim()),
            None => (part, "1"),
        };
        let weight: f64 = weight
            .parse()
            .map_err(|_| SimError::Config(format!("bad operator_mix weight '{weight}'")))?;
        out.push((name.parse()?, weight));
    }
    Ok(out)
}

/// Sets one config key from its text value; `line` is used in messages.
pub fn apply_key(cfg: &mut WorkloadConfig, key: &str, value: &str, line: usize) -> Result<(), SimError> {
    let bad = || SimError::Config(format!("line {line}: bad value '{value}' for {key}"));
    let float = || value.parse::<f64>().map_err(|_| bad());
    match key {
        "family_id" => cfg.family_id = value.to_string(),
        "query_count" => cfg.query_count = value.parse().map_err(|_| bad())?,
        "scale" => cfg.scale = float()?,
        "skew_z" => cfg.skew_z = float()?,
        "estimate_error_sigma" => cfg.estimate_error_sigma = float()?,
        "operator_mix" => cfg.operator_mix = parse_mix(value)?,
        "observation_interval" => cfg.observation_interval = float()?,
        "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
        "cost_profile" => {
            cfg.cost_profile = match value {
                "operator" => CostProfile::Operator,
                "uniform" => CostProfile::Uniform,
                _ => return Err(bad()),
            }
        }
        "cost_sigma" => cfg.cost_sigma = float()?,
        "spill_probability" => cfg.spill_probability = float()?,
        _ => return Err(SimError::Config(format!("line {line}: unknown key '{key}'"))),
    }
    Ok(())
}

/// Parses a workload config file.
///
/// Keys before the first `[family <name>]` header are defaults for every
/// family. A file without headers describes one family. A family without an
/// explicit `seed` gets the global seed mixed with its name.
pub fn parse_workload_config(text: &str) -> Result<Vec<WorkloadConfig>, SimError> {
    let mut defaults: Vec<(String, String, usize)> = Vec::new();
    let mut families: Vec<(String, Vec<(String, String, usize)>)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = header
                .trim()
                .strip_prefix("family")
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| SimError::Config(format!("line {}: expected [family <name>]", n + 1)))?;
            families.push((name.to_string(), Vec::new()));
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| SimError::Config(format!("line {}: expected key = value", n + 1)))?;
        let entry = (k.trim().to_string(), v.trim().to_string(), n + 1);
        match families.last_mut() {
            Some((_, kv)) => kv.push(entry),
            None => defaults.push(entry),
        }
    }
    if families.is_empty() {
        let name = defaults
            .iter()
            .find(|(k, _, _)| k == "family_id")
            .map(|(_, v, _)| v.clone())
            .unwrap_or_else(|| "default".to_string());
        families.push((name, Vec::new()));
    }
    let global_seed = defaults
        .iter()
        .find(|(k, _, _)| k == "seed")
        .map(|(_, v, l)| {
            v.parse::<u64>()
                .map_err(|_| SimError::Config(format!("line {l}: bad seed")))
        })
        .transpose()?
        .unwrap_or(0);

    let mut out = Vec::new();
    for (name, kv) in families {
        let mut cfg = WorkloadConfig::new(name.clone());
        for (k, v, l) in &defaults {
            if k != "family_id" {
                apply_key(&mut cfg, k, v, *l)?;
            }
        }
        cfg.seed = global_seed ^ fnv1a(&name);
        for (k, v, l) in &kv {
            apply_key(&mut cfg, k, v, *l)?;
        }
        cfg.family_id = name;
        cfg.validate()?;
        out.push(cfg);
    }
    Ok(out)
}

/// Re-derives every family seed from a new global seed.
pub fn reseed(configs: &mut [WorkloadConfig], global_seed: u64) {
    for c in configs {
        c.seed = global_seed ^ fnv1a(&c.family_id);
    }
}

pub fn write_specs<W: Write>(mut out: W, specs: &[QuerySpec]) -> Result<(), SimError> {
    for s in specs {
        serde_json::to_writer(&mut out, s).map_err(|e| SimError::Format(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_specs<R: BufRead>(input: R) -> Result<Vec<QuerySpec>, SimError> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| SimError::Format(format!("spec line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    query_id: String,
    family: String,
    plan: Plan,
    pipelines: Vec<Pipeline>,
    spans: Vec<Span>,
    truth: Truth,
}

pub fn write_trace<W: Write>(mut out: W, trace: &Trace) -> Result<(), SimError> {
    let header = TraceHeader {
        query_id: trace.query_id.clone(),
        family: trace.family.clone(),
        plan: trace.plan.clone(),
        pipelines: trace.pipelines.clone(),
        spans: trace.spans.clone(),
        truth: trace.truth.clone(),
    };
    let fmt = |e: serde_json::Error| SimError::Format(e.to_string());
    serde_json::to_writer(&mut out, &header).map_err(fmt)?;
    out.write_all(b"\n")?;
    for snap in &trace.observations {
        serde_json::to_writer(&mut out, snap).map_err(fmt)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Trace, SimError> {
    let mut lines = input.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| SimError::Format("empty trace file".into()))??;
    let header: TraceHeader = serde_json::from_str(&header_line)
        .map_err(|e| SimError::Format(format!("trace header: {e}")))?;
    let mut observations: Vec<CounterSnapshot> = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        observations.push(
            serde_json::from_str(&line)
                .map_err(|e| SimError::Format(format!("snapshot line {}: {e}", n + 2)))?,
        );
    }
    let nodes = header.plan.nodes.len();
    if observations.iter().any(|o| o.k.len() != nodes) {
        return Err(SimError::Format("snapshot width differs from plan".into()));
    }
    if header
        .spans
        .iter()
        .any(|s| s.end >= observations.len() || s.start > s.end)
    {
        return Err(SimError::Format("pipeline span outside observations".into()));
    }
    Ok(Trace {
        query_id: header.query_id,
        family: header.family,
        plan: header.plan,
        pipelines: header.pipelines,
        spans: header.spans,
        truth: header.truth,
        observations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{execute, generate_workload};

    #[test]
    fn config_with_families() {
        let text = "seed = 9\nskew_z = 1\n\n[family a]\nquery_count = 3\n[family b]\nskew_z = 2 # override\noperator_mix = nl_seek:2, batch_nl\n";
        let cfgs = parse_workload_config(text).unwrap();
        assert_eq!(cfgs.len(), 2);
        assert_eq!(cfgs[0].family_id, "a");
        assert_eq!(cfgs[0].query_count, 3);
        assert_eq!(cfgs[0].skew_z, 1.0);
        assert_eq!(cfgs[1].skew_z, 2.0);
        assert_eq!(
            cfgs[1].operator_mix,
            vec![(Template::NlSeek, 2.0), (Template::BatchNl, 1.0)]
        );
        assert_ne!(cfgs[0].seed, cfgs[1].seed);
    }

    #[test]
    fn config_errors() {
        assert!(parse_workload_config("bogus = 1").is_err());
        assert!(parse_workload_config("scale = -1").is_err());
        assert!(parse_workload_config("operator_mix = nope:1").is_err());
        assert!(parse_workload_config("no equals sign").is_err());
    }

    #[test]
    fn trace_file_round_trip() {
        let mut c = WorkloadConfig::new("f");
        c.query_count = 2;
        c.skew_z = 1.0;
        c.estimate_error_sigma = 0.4;
        for spec in generate_workload(&c).unwrap() {
            let trace = execute(&spec, 1.0).unwrap();
            let mut buf = Vec::new();
            write_trace(&mut buf, &trace).unwrap();
            let back = read_trace(&buf[..]).unwrap();
            assert_eq!(back, trace);
        }
    }
}
