//! Loads a two-channel CSV with a timestamp column and a damaged row, splits
//! it chronologically, and shows what one normalized training window looks
//! like.
//!
//! cargo run --example csv_windows

use std::fmt::Write as _;

use flowcast::data::{load_csv, prepare, window_count, DataConfig, SplitMode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("load.csv");
    let mut text = String::from("date,north,south\n");
    for i in 0..400 {
        let north = 50.0 + 10.0 * (i as f64 * std::f64::consts::TAU / 24.0).sin();
        let south = 20.0 + 0.05 * i as f64;
        if i == 123 {
            writeln!(text, "2024-01-{i},NaN,{south}").unwrap();
        } else {
            writeln!(text, "2024-01-{i},{north:.3},{south:.3}").unwrap();
        }
    }
    std::fs::write(&path, text)?;

    let ds = load_csv(&path)?;
    println!(
        "{} rows x {} channels {:?}, {} rejected, first stamp {:?}",
        ds.len(),
        ds.channels(),
        ds.column_names,
        ds.rejected_rows,
        ds.timestamps.as_ref().map(|t| &t[0])
    );

    let cfg = DataConfig {
        look_back: 48,
        horizon: 24,
        stride: 6,
        eval_stride: 24,
        split: SplitMode::Ratio { train: 0.7, val: 0.1, test: 0.2 },
        ..DataConfig::default()
    };
    let p = prepare(&ds, &cfg)?;
    for (name, rows, windows, stride) in [
        ("train", &p.splits.train, &p.train, cfg.stride),
        ("val", &p.splits.val, &p.val, cfg.eval_stride),
        ("test", &p.splits.test, &p.test, cfg.eval_stride),
    ] {
        let per_channel = window_count(rows.len(), cfg.look_back, cfg.horizon, stride);
        println!("{name:>5}: rows {rows:?}, {} windows ({per_channel} per channel)", windows.len());
    }

    // Channels are independent instances; the second half of train is `south`.
    let w = &p.train[p.train.len() / 2 + 1];
    println!(
        "window channel {} origin {}: mean {:.3} std {:.3}, context tokens {:?}",
        w.channel, w.origin, w.mean, w.std, w.context
    );
    let head: Vec<String> = w.x_hist.iter().take(6).map(|v| format!("{v:.3}")).collect();
    println!("normalized look-back starts {}", head.join(" "));
    let raw: Vec<String> = w.raw_target().iter().take(6).map(|v| format!("{v:.3}")).collect();
    println!("raw target starts {}", raw.join(" "));
    Ok(())
}
