//! Markdown tables and SVG plots rendered from a stored run report.

use std::fmt::Write as _;
use std::path::Path;

use plotters::prelude::*;
use wttf_core::classifier::Variant;
use wttf_core::harness::TrainHistory;
use wttf_core::metrics::MetricsReport;
use wttf_core::pipeline::{write_file, RunReport};
use wttf_core::{Error, Result};

pub const MARKDOWN: &str = "report.md";
pub const LEARNING_CURVES: &str = "learning_curves.svg";
pub const DISPLACEMENT: &str = "displacement.svg";

pub fn setting_name(v: Variant) -> &'static str {
    match v {
        Variant::Full => "With WT",
        Variant::Bypass => "Without WT",
    }
}

fn metrics_row(s: &mut String, name: &str, m: &MetricsReport) {
    let _ = writeln!(
        s,
        "| {name} | {:.3} | {:.3} | {:.2} | {:.2} |",
        m.ade,
        m.fde,
        100.0 * m.acc,
        100.0 * m.kappa
    );
}

pub fn markdown(r: &RunReport) -> String {
    let mut s = String::from("# Run report\n\n");
    let _ = writeln!(s, "Master seed {}, schema version {}.\n", r.config.seed, r.schema_version);
    s.push_str("## Data\n\n");
    let _ = writeln!(
        s,
        "{} trajectories loaded, {} after cleaning, {} labeled into {} destinations.\n",
        r.data.loaded, r.data.cleaned, r.data.labeled, r.clustering.k
    );
    s.push_str("| Destination | Centroid x | Centroid y | Samples |\n|---|---|---|---|\n");
    for (k, (c, n)) in r.clustering.surviving_centroids.iter().zip(&r.data.per_label).enumerate() {
        let _ = writeln!(s, "| {k} | {:.2} | {:.2} | {n} |", c.x, c.y);
    }
    for m in &r.clustering.merges {
        let _ = writeln!(
            s,
            "\nCluster {} merged into cluster {} (min expected count {:.2}).",
            m.from, m.into, m.min_expected
        );
    }
    s.push_str("\n## Weather-time dependence\n\n");
    let w = &r.wt_test;
    let _ = writeln!(
        s,
        "chi2 = {:.2} (dof {}), log10 p = {:.4}, {} at 0.05.\n",
        w.chi2,
        w.dof,
        w.log10_p,
        if w.significant { "significant" } else { "not significant" }
    );
    if let Some(cv) = &r.cv {
        s.push_str("## Cross-validation\n\n| Rotation | Best epoch | ACC (%) | Kappa (%) |\n|---|---|---|---|\n");
        for f in &cv.folds {
            let _ = writeln!(
                s,
                "| {} | {} | {:.2} | {:.2} |",
                f.rotation,
                f.history.best_epoch,
                100.0 * f.test.acc,
                100.0 * f.test.kappa
            );
        }
        let _ = writeln!(
            s,
            "| mean | | {:.2} | {:.2} |\n",
            100.0 * cv.mean_test_acc,
            100.0 * cv.mean_test_kappa
        );
    }
    if let Some(ab) = &r.ablation {
        let p = &ab.paired;
        s.push_str("## Ablation\n\n| Setting | ADE | FDE | ACC (%) | Kappa (%) |\n|---|---|---|---|---|\n");
        metrics_row(&mut s, setting_name(p.setting_a), &p.pooled_a);
        metrics_row(&mut s, setting_name(p.setting_b), &p.pooled_b);
        let rel = &p.relative;
        let _ = writeln!(
            s,
            "| Improvement (%) | {:.2} | {:.2} | {:.2} | {:.2} |\n",
            rel.r_ade, rel.r_fde, rel.r_acc, rel.r_kappa
        );
        let g = &ab.significance;
        s.push_str("## Significance\n\n");
        let _ = writeln!(
            s,
            "McNemar: b = {}, c = {}, {}, log10 p = {:.4}, {}.\n",
            g.mcnemar.b,
            g.mcnemar.c,
            match g.mcnemar.statistic {
                Some(x) => format!("statistic {x:.3}"),
                None => "exact binomial".to_string(),
            },
            g.mcnemar.log10_p,
            if g.mcnemar.significant { "significant" } else { "not significant" }
        );
        let _ = writeln!(
            s,
            "{} out of {} samples had their predicted destination changed by weather-time input.\n",
            g.influenced.count, g.n
        );
        s.push_str("| Subset | Count | ADE without | ADE with | FDE without | FDE with |\n|---|---|---|---|---|---|\n");
        for (name, sub) in [("Influenced", &g.influenced), ("Not influenced", &g.not_influenced)] {
            let _ = writeln!(
                s,
                "| {name} | {} | {:.3} | {:.3} | {:.3} | {:.3} |",
                sub.count, sub.mean_ade_a, sub.mean_ade_b, sub.mean_fde_a, sub.mean_fde_b
            );
        }
        s.push('\n');
        for (name, t) in [("ADE", &g.ade_test), ("FDE", &g.fde_test)] {
            if let Some(t) = t {
                let _ = writeln!(
                    s,
                    "Mann-Whitney U on influenced {name} (with WT smaller): U = {}, z = {:.3}, p = {:.3e}, {}.\n",
                    t.u,
                    t.z,
                    t.p_value,
                    if t.significant { "significant" } else { "not significant" }
                );
            }
        }
        if let Some(n) = &g.note {
            let _ = writeln!(s, "{n}\n");
        }
    }
    let _ = writeln!(s, "![learning curves]({LEARNING_CURVES})");
    if r.ablation.is_some() {
        let _ = writeln!(s, "\n![displacement errors]({DISPLACEMENT})");
    }
    s
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidInput(format!("plot: {e}"))
}

fn histories(r: &RunReport) -> Vec<(String, RGBColor, &TrainHistory)> {
    let mut out = Vec::new();
    if let Some(cv) = &r.cv {
        for f in &cv.folds {
            out.push((format!("rotation {}", f.rotation), BLUE, &f.history));
        }
    }
    if let Some(ab) = &r.ablation {
        for f in &ab.paired.folds {
            out.push((format!("{} r{}", setting_name(ab.paired.setting_a), f.rotation), RED, &f.history_a));
            out.push((format!("{} r{}", setting_name(ab.paired.setting_b), f.rotation), BLUE, &f.history_b));
        }
    }
    out
}

fn series_panel(
    area: &DrawingArea<SVGBackend, plotters::coord::Shift>,
    title: &str,
    hs: &[(String, RGBColor, &TrainHistory)],
    pick: fn(&TrainHistory) -> &[f64],
) -> Result<()> {
    let epochs = hs.iter().map(|h| pick(h.2).len()).max().unwrap_or(1).max(2);
    let (lo, hi) = hs
        .iter()
        .flat_map(|h| pick(h.2).iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, 1.0) };
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(1.0..epochs as f64, lo..hi)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .draw()
        .map_err(plot_err)?;
    for (_, color, h) in hs {
        let pts = pick(h).iter().enumerate().map(|(i, &v)| (i as f64 + 1.0, v));
        chart.draw_series(LineSeries::new(pts, color)).map_err(plot_err)?;
    }
    Ok(())
}

/// Training loss and validation accuracy per epoch for every rotation.
pub fn learning_curves(r: &RunReport, path: &Path) -> Result<()> {
    let hs = histories(r);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (960, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let (left, right) = root.split_horizontally(480);
        series_panel(&left, "training loss", &hs, |h| &h.train_loss)?;
        series_panel(&right, "validation accuracy (red: without WT, blue: with WT)", &hs, |h| &h.val_acc)?;
        root.present().map_err(plot_err)?;
    }
    write_file(path, svg.as_bytes())
}

/// Mean ADE and FDE per setting over all test samples and the influenced subset.
pub fn displacement(r: &RunReport, path: &Path) -> Result<()> {
    let ab = r
        .ablation
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("report has no ablation results".into()))?;
    let p = &ab.paired;
    let inf = &ab.significance.influenced;
    let groups = [
        ("ADE all", p.pooled_a.ade, p.pooled_b.ade),
        ("FDE all", p.pooled_a.fde, p.pooled_b.fde),
        ("ADE influenced", inf.mean_ade_a, inf.mean_ade_b),
        ("FDE influenced", inf.mean_fde_a, inf.mean_fde_b),
    ];
    let top = groups.iter().map(|g| g.1.max(g.2)).fold(0.0, f64::max).max(1e-9) * 1.1;
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (720, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("displacement error (red: without WT, blue: with WT)", ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(0.0..groups.len() as f64, 0.0..top)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(groups.len() * 2 + 1)
            .x_label_formatter(&|x| {
                let i = x.floor() as usize;
                if (x - x.floor() - 0.5).abs() < 1e-9 && i < groups.len() {
                    groups[i].0.to_string()
                } else {
                    String::new()
                }
            })
            .y_desc("meters")
            .draw()
            .map_err(plot_err)?;
        chart
            .draw_series(groups.iter().enumerate().flat_map(|(i, g)| {
                let x = i as f64;
                [
                    Rectangle::new([(x + 0.15, 0.0), (x + 0.5, g.1)], RED.filled()),
                    Rectangle::new([(x + 0.5, 0.0), (x + 0.85, g.2)], BLUE.filled()),
                ]
            }))
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    write_file(path, svg.as_bytes())
}

/// Writes the markdown summary and plots for the report into `out`.
pub fn render_all(r: &RunReport, out: &Path) -> Result<Vec<String>> {
    let mut written = vec![MARKDOWN.to_string(), LEARNING_CURVES.to_string()];
    write_file(&out.join(MARKDOWN), markdown(r).as_bytes())?;
    learning_curves(r, &out.join(LEARNING_CURVES))?;
    if r.ablation.is_some() {
        displacement(r, &out.join(DISPLACEMENT))?;
        written.push(DISPLACEMENT.to_string());
    }
    Ok(written)
}
