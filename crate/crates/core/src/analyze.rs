//! Spline-statistics export for the figure scripts.
//!
//! Layout under the output directory:
//!
//! - `param_counts.csv` — `component,params`, ending with a `total` row
//! - `layer_summary.csv` — one row per KAN layer: sizes, `|w|` mean,
//!   variance, min, max, and the mean coefficient per basis index
//! - `layers/<layer>_units.csv` — `unit,l2_norm,w0..w{M-1}`, one row per unit
//! - `layers/<layer>_hist.csv` — `bin,lo,hi,count` over all coefficients
//! - `layers/<layer>_curves.csv` — `u,unit0..unit{d_out-1}`, the response of
//!   every unit on a uniform grid over the spline domain

use std::fs;
use std::path::Path;

use crate::diff::ParamStore;
use crate::kan::SplineStats;
use crate::perception::Network;

fn g(x: f64) -> String {
    format!("{x:.9e}")
}

pub fn write_param_counts(net: &Network, store: &ParamStore, path: &Path) -> Result<(), csv::Error> {
    let counts = net.param_counts(store);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["component", "params"])?;
    for (name, n) in &counts.rows {
        w.write_record([name.as_str(), &n.to_string()])?;
    }
    w.write_record(["total", &counts.total.to_string()])?;
    w.flush()?;
    Ok(())
}

pub fn write_layer_files(stats: &SplineStats, store: &ParamStore, net: &Network, dir: &Path) -> Result<(), csv::Error> {
    let m = stats.mean_coef.len();
    let layer = net.kan_layers().into_iter().find(|l| l.name == stats.layer).expect("layer belongs to network");
    let coef = store.value(layer.coef_id()).data();

    let mut w = csv::Writer::from_path(dir.join(format!("{}_units.csv", stats.layer)))?;
    let mut head = vec!["unit".to_string(), "l2_norm".to_string()];
    head.extend((0..m).map(|i| format!("w{i}")));
    w.write_record(&head)?;
    for (j, norm) in stats.unit_norms.iter().enumerate() {
        let mut row = vec![j.to_string(), g(*norm)];
        row.extend(coef[j * m..(j + 1) * m].iter().map(|&v| g(v)));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(format!("{}_hist.csv", stats.layer)))?;
    w.write_record(["bin", "lo", "hi", "count"])?;
    let bins = stats.hist.len() as f64;
    let width = (stats.hist_hi - stats.hist_lo) / bins;
    for (i, c) in stats.hist.iter().enumerate() {
        let lo = stats.hist_lo + width * i as f64;
        w.write_record([i.to_string(), g(lo), g(lo + width), c.to_string()])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(format!("{}_curves.csv", stats.layer)))?;
    let mut head = vec!["u".to_string()];
    head.extend((0..stats.curves.len()).map(|j| format!("unit{j}")));
    w.write_record(&head)?;
    for (i, u) in stats.grid.iter().enumerate() {
        let mut row = vec![g(*u)];
        row.extend(stats.curves.iter().map(|c| g(c[i])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every export for `net` into `out`. Output is a pure function of
/// the parameters.
pub fn export_all(net: &Network, store: &ParamStore, out: &Path) -> Result<Vec<SplineStats>, csv::Error> {
    let layers_dir = out.join("layers");
    fs::create_dir_all(&layers_dir)?;
    write_param_counts(net, store, &out.join("param_counts.csv"))?;
    let stats: Vec<SplineStats> = net.kan_layers().iter().map(|l| l.stats(store)).collect();
    let m = stats.first().map_or(0, |s| s.mean_coef.len());
    let mut w = csv::Writer::from_path(out.join("layer_summary.csv"))?;
    let mut head: Vec<String> =
        ["layer", "d_in", "units", "abs_mean", "abs_var", "abs_min", "abs_max"].iter().map(|s| s.to_string()).collect();
    head.extend((0..m).map(|i| format!("mean_w{i}")));
    w.write_record(&head)?;
    for (s, l) in stats.iter().zip(net.kan_layers()) {
        let mut row = vec![
            s.layer.clone(),
            l.d_in.to_string(),
            l.d_out.to_string(),
            g(s.abs_mean),
            g(s.abs_var),
            g(s.abs_min),
            g(s.abs_max),
        ];
        row.extend(s.mean_coef.iter().map(|&v| g(v)));
        w.write_record(&row)?;
        write_layer_files(s, store, net, &layers_dir)?;
    }
    w.flush()?;
    Ok(stats)
}
