//! Writes the small synthetic datasets used by the command-line tests.
//!
//! `cargo run --example synthetic_data -- <dir>` creates `panel.csv`,
//! `staggered.csv` and `coords.csv` in `<dir>`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use spillover_did::exposure::ExposureSpec;
use spillover_did::montecarlo::{
    Assignment, DgpConfig, Scale, Simulator, StaggeredConfig, StaggeredSimulator,
};
use spillover_did::panel::{write_panel, PanelDataset, Record};
use spillover_did::spatial::grid_points;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| ".".into()));
    std::fs::create_dir_all(&dir)?;
    let points = grid_points(15, 20, 20.0);

    let config = DgpConfig {
        points: points.clone(),
        n_periods: 8,
        treat_start: 5,
        p_treated: 0.03,
        assignment: Assignment::Uniform,
        control_spillover: Scale::Fixed(-0.5),
        treated_spillover: Scale::Fixed(0.3),
        ..DgpConfig::grid_default(ExposureSpec::WithinIndicator { dbar: 80.0 }, 2024)
    };
    let sim = Simulator::new(config)?.generate(0)?;
    // One covariate with a known slope of 0.5.
    let records: Vec<Record> = sim
        .panel
        .observations()
        .iter()
        .map(|o| {
            let x = (((o.unit * 7 + o.time as usize * 3) % 11) as f64 - 5.0) / 10.0;
            Record {
                unit: sim.panel.units()[o.unit].clone(),
                time: o.time,
                outcome: round6(o.outcome + 0.5 * x),
                treated: o.treated,
                covariates: vec![x],
            }
        })
        .collect();
    let panel = PanelDataset::from_records(records, vec!["x".into()])?;
    write_panel(&panel, BufWriter::new(File::create(dir.join("panel.csv"))?))?;

    let stag = StaggeredSimulator::new(StaggeredConfig {
        points: points.clone(),
        n_periods: 12,
        start_range: (4, 9),
        p_treated: 0.1,
        dbar: 25.0,
        ..StaggeredConfig::grid_default(99)
    })?;
    let (sp, _) = stag.generate(0)?;
    let sp = sp.with_outcomes(|o| round6(o.outcome));
    write_panel(&sp, BufWriter::new(File::create(dir.join("staggered.csv"))?))?;

    let mut w = BufWriter::new(File::create(dir.join("coords.csv"))?);
    writeln!(w, "unit_id,x,y")?;
    for (id, c) in points.ids().iter().zip(points.coords()) {
        writeln!(w, "{id},{},{}", c[0], c[1])?;
    }
    w.flush()?;
    Ok(())
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}
