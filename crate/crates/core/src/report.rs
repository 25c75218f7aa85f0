//! CSV renderings of run results. Floats use Rust's shortest round-trip
//! formatting, so identical runs produce identical bytes.

use std::fmt::Write as _;

use crate::harness::{Metrics, NoiseRow, SweepRow};
use crate::routing::{stats_csv_rows, StatsReport, STATS_CSV_HEADER};
use crate::smop::RouterRole;

/// Long format: `epoch,split,metric,value`.
pub fn metrics_csv(m: &Metrics) -> String {
    let mut s = String::from("epoch,split,metric,value\n");
    for e in &m.epochs {
        let _ = writeln!(s, "{},train,lr,{}", e.epoch, e.lr);
        for (split, parts) in [("train", Some(e.train)), ("val", e.val)] {
            if let Some(p) = parts {
                for (k, v) in [("nll", p.nll), ("lb", p.lb), ("lz", p.lz), ("total", p.total)] {
                    let _ = writeln!(s, "{},{split},{k},{v}", e.epoch);
                }
            }
        }
    }
    let last = m.epochs.last().map_or(0, |e| e.epoch);
    let _ = writeln!(s, "{last},test,ter,{}", m.test_ter);
    for (role, r) in &m.routing {
        let _ = writeln!(s, "{last},test,imbalance_{},{}", role.as_str(), r.imbalance_ratio());
    }
    let a = &m.accounting;
    for (k, v) in [
        ("activated_expert_params", a.activated_expert_params),
        ("router_params_per_token", a.router_params_per_token),
        ("total_expert_params", a.total_expert_params),
        ("total_projector_params", a.total_params()),
        ("trainable_params", m.trainable_params),
        ("frozen_params", m.frozen_params),
    ] {
        let _ = writeln!(s, "{last},model,{k},{v}");
    }
    let _ = writeln!(s, "{last},model,frozen_sha256,{}", m.frozen_digest);
    s
}

/// `step,nll,lb,lz,total`, one row per optimizer step.
pub fn losses_csv(m: &Metrics) -> String {
    let mut s = String::from("step,nll,lb,lz,total\n");
    for (i, p) in m.steps.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{},{}", p.nll, p.lb, p.lz, p.total);
    }
    s
}

pub fn routing_csv(routing: &[(RouterRole, StatsReport)]) -> String {
    let mut s = format!("{STATS_CSV_HEADER}\n");
    for (role, r) in routing {
        s.push_str(&stats_csv_rows(role.as_str(), r));
    }
    s
}

/// One row per task, one column per SNR level.
pub fn noise_csv(rows: &[NoiseRow]) -> String {
    let mut levels: Vec<f64> = Vec::new();
    for r in rows {
        if !levels.contains(&r.snr_db) {
            levels.push(r.snr_db);
        }
    }
    let mut tasks = Vec::new();
    for r in rows {
        if !tasks.contains(&r.task) {
            tasks.push(r.task);
        }
    }
    let mut s = String::from("task");
    for l in &levels {
        let _ = write!(s, ",snr_{l}");
    }
    s.push('\n');
    for t in tasks {
        s.push_str(&t.to_string());
        for l in &levels {
            let v = rows
                .iter()
                .find(|r| r.task == t && r.snr_db == *l)
                .map(|r| r.ter.to_string())
                .unwrap_or_default();
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("n_experts,ter,activated_expert_params,total_expert_params,total_projector_params\n");
    for r in rows {
        let a = &r.accounting;
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.n_experts,
            r.ter,
            a.activated_expert_params,
            a.total_expert_params,
            a.total_params()
        );
    }
    s
}
