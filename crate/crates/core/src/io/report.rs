//! Report files: JSON for machines, TSV tables for plotting.

use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::experiments::{arm_deltas, BiasTable, ExperimentResult, OfflineReport};
use crate::metrics::{Metric, MetricReport};

pub const CVP_CURVE_HEADER: &str = "x\tcvp";
pub const CSR_CURVE_HEADER: &str = "horizon_h\tcsr";
pub const CVP_LATENCY_HEADER: &str = "genre\tbucket\tcontents\tcvp";
pub const SURFACES_HEADER: &str = "surface\tfetches\timpressions\tplays\tsuccessful\tengaged\tfresh_impressions\t\
play_rate\tsuccessful_play_rate\tengagement_per_view\tengagement_per_fetch\tfresh_impression_share";
pub const SCALARS_HEADER: &str = "metric\tvalue";
pub const DELTAS_HEADER: &str = "metric\tarm\tbaseline\tmean\tstd\treplicates";
pub const BIAS_HEADER: &str = "metric\tarm\tdelta_hat\tdelta_truth\tbias\tbias_std\treplicates";
pub const EXPOSURE_HEADER: &str = "seed\tarm\tviews_early\tviews_growth\tviews_mature\tfresh_views\t\
leakage_views\tcross_arm_impressions\tfresh_share";
pub const OFFLINE_HEADER: &str = "strategy\tauc\tf1\trela_impr_pct";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("report json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Write a header line and tab-joined rows.
pub fn write_tsv<I, R>(path: &Path, header: &str, rows: I) -> Result<(), ReportError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: Display,
{
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{header}")?;
    for row in rows {
        let cells: Vec<String> = row.into_iter().map(|c| c.to_string()).collect();
        writeln!(out, "{}", cells.join("\t"))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), ReportError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// `report.json` plus the TSV tables of one report, in `dir`.
pub fn write_report(dir: &Path, report: &MetricReport) -> Result<(), ReportError> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), report)?;
    write_tsv(
        &dir.join("scalars.tsv"),
        SCALARS_HEADER,
        report.scalars.iter().map(|(k, v)| [k.clone(), v.to_string()]),
    )?;
    write_tsv(
        &dir.join("cvp_curve.tsv"),
        CVP_CURVE_HEADER,
        report.cvp_curve.iter().map(|p| [p.x.to_string(), p.value.to_string()]),
    )?;
    write_tsv(
        &dir.join("csr_curve.tsv"),
        CSR_CURVE_HEADER,
        report.csr_curve.iter().map(|p| [p.x.to_string(), p.value.to_string()]),
    )?;
    write_tsv(
        &dir.join("cvp_latency.tsv"),
        CVP_LATENCY_HEADER,
        report.latency_curves.iter().flat_map(|c| {
            c.points.iter().map(|p| [c.genre.clone(), p.bucket.clone(), p.contents.to_string(), p.cvp.to_string()])
        }),
    )?;
    write_tsv(
        &dir.join("surfaces.tsv"),
        SURFACES_HEADER,
        report.surfaces.iter().map(|s| {
            vec![
                s.surface.as_str().to_string(),
                s.fetches.to_string(),
                s.impressions.to_string(),
                s.plays.to_string(),
                s.successful.to_string(),
                s.engaged.to_string(),
                s.fresh_impressions.to_string(),
                s.play_rate.to_string(),
                s.successful_play_rate.to_string(),
                s.engagement_per_view.to_string(),
                s.engagement_per_fetch.to_string(),
                s.fresh_impression_share.to_string(),
            ]
        }),
    )?;
    Ok(())
}

/// Global report in `dir`, one subdirectory `arm_<label>` per arm report.
pub fn write_run_reports(dir: &Path, global: &MetricReport, arms: &[MetricReport]) -> Result<(), ReportError> {
    write_report(dir, global)?;
    for a in arms {
        write_report(&dir.join(format!("arm_{}", a.label)), a)?;
    }
    Ok(())
}

pub fn write_experiment(dir: &Path, res: &ExperimentResult, bias: Option<&BiasTable>) -> Result<(), ReportError> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("experiment.json"), res)?;
    for arm in &res.arms {
        write_json(&dir.join(format!("arm_{}.json", arm.label)), arm)?;
    }
    write_tsv(
        &dir.join("deltas.tsv"),
        DELTAS_HEADER,
        arm_deltas(res)
            .into_iter()
            .map(|d| [d.metric, d.arm, d.baseline, d.mean.to_string(), d.std.to_string(), d.replicates.to_string()]),
    )?;
    let mut rows = Vec::new();
    for (i, seed) in res.seeds.iter().enumerate() {
        for arm in &res.arms {
            let x = &arm.exposure[i];
            rows.push([
                seed.to_string(),
                arm.label.clone(),
                x.views_early.to_string(),
                x.views_growth.to_string(),
                x.views_mature.to_string(),
                x.fresh_views.to_string(),
                x.leakage_views.to_string(),
                x.cross_arm_impressions.to_string(),
                arm.fresh_share[i].to_string(),
            ]);
        }
    }
    write_tsv(&dir.join("exposure.tsv"), EXPOSURE_HEADER, rows)?;
    if let Some(b) = bias {
        write_bias(&dir.join("bias.tsv"), b)?;
    }
    Ok(())
}

pub fn write_bias(path: &Path, b: &BiasTable) -> Result<(), ReportError> {
    write_tsv(
        path,
        BIAS_HEADER,
        b.rows.iter().map(|r| {
            [
                r.metric.clone(),
                r.arm.clone(),
                r.delta_hat.to_string(),
                r.delta_truth.to_string(),
                r.bias.to_string(),
                r.bias_std.to_string(),
                r.replicates.to_string(),
            ]
        }),
    )
}

pub fn write_offline(dir: &Path, r: &OfflineReport) -> Result<(), ReportError> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("offline.json"), r)?;
    write_tsv(
        &dir.join("offline.tsv"),
        OFFLINE_HEADER,
        r.rows.iter().map(|row| {
            [
                row.strategy.as_str().to_string(),
                row.auc.to_string(),
                Metric(Some(row.f1)).to_string(),
                row.rela_impr.to_string(),
            ]
        }),
    )
}
