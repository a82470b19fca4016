//! Turns per-frame scores into a curve, an aggregate score and overlay data.

use fmeter::analysis::{aggregate_score, curve_export, overlay, parse_curve, ScoreSeries};
use fmeter::plugin::{FrameScore, HardLabel};

fn series(id: &str, soft: impl Fn(u32) -> f64) -> ScoreSeries {
    let scores = (0..40)
        .map(|i| {
            let s = soft(i);
            FrameScore {
                frame_index: i,
                soft_label: s,
                hard_label: HardLabel::from_soft(s, 0.5),
                face_found: true,
            }
        })
        .collect();
    ScoreSeries::new(id, scores).expect("valid series")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let flat = series("flat", |_| 0.25);
    let wave = series("wave", |i| 0.5 + 0.4 * (i as f64 / 6.0).sin());
    let ramp = series("ramp", |i| i as f64 / 39.0);

    for s in [&flat, &wave, &ramp] {
        println!("{:>5}: aggregate {:.4}", s.detector_id, aggregate_score(s)?);
    }

    let csv = curve_export(&wave);
    println!("\nfirst curve rows:\n{}", csv.lines().take(4).collect::<Vec<_>>().join("\n"));
    // the CSV keeps six decimals
    let reparsed = parse_curve("wave", &csv)?;
    assert!((aggregate_score(&reparsed)? - aggregate_score(&wave)?).abs() < 1e-6);

    let chart = overlay(&[&flat, &wave, &ramp])?;
    println!("\noverlay: {} curves of {} frames", chart.detectors.len(), chart.frame_count);
    Ok(())
}
