//! Round-trip and detection guarantees of the attribute oracle.
//!
//! Tolerances live in tests/fixtures/oracle_tolerances.json. They were
//! frozen from the grid sweep in `calibrate_oracle_fixture` (run it with
//! --ignored to re-derive them) and bound the worst case over the whole
//! declared style space, range extremes included.

use serde::Deserialize;

use dirforge::world::{
    make_pairs, read_attributes, registry, render, sample_styles, Attribute, StyleVector,
    WorldConfig, ATTR_COUNT,
};

#[derive(Debug, Deserialize)]
struct OracleFixture {
    /// Max |estimate - truth| per attribute, attribute units.
    round_trip_max_abs_err: std::collections::BTreeMap<String, f64>,
    /// Min fraction of styles whose own edit is read back as the largest
    /// normalized attribute shift.
    detection_rate_min: f64,
}

fn fixture() -> OracleFixture {
    serde_json::from_str(include_str!("fixtures/oracle_tolerances.json"))
        .expect("fixture parses")
}

/// 4 values per attribute through every combination, endpoints included.
fn style_grid(levels: usize) -> Vec<StyleVector> {
    let mut grid = vec![[0.0; ATTR_COUNT]];
    for attr in Attribute::ALL {
        let (lo, hi) = attr.range();
        let mut next = Vec::with_capacity(grid.len() * levels);
        for partial in &grid {
            for step in 0..levels {
                let mut p = *partial;
                p[attr.index()] = lo + (hi - lo) * step as f64 / (levels - 1) as f64;
                next.push(p);
            }
        }
        grid = next;
    }
    grid.into_iter().map(StyleVector::from_array).collect()
}

fn sweep_round_trip(levels: usize) -> [f64; ATTR_COUNT] {
    let cfg = WorldConfig::default();
    let mut worst = [0.0_f64; ATTR_COUNT];
    for s in style_grid(levels) {
        let est = read_attributes(&cfg, &render(&cfg, &s).image);
        assert_eq!(est.confidence, 1.0, "in-range blob must be detected: {s:?}");
        let truth = s.as_array();
        let got = est.style.as_array();
        for i in 0..ATTR_COUNT {
            worst[i] = worst[i].max((got[i] - truth[i]).abs());
        }
    }
    worst
}

/// Fraction of styles whose rendered edit reads back with its largest
/// normalized shift on the direction's own attribute.
fn detection_rate(dir_name: &str, n: usize, seed: u64) -> f64 {
    let cfg = WorldConfig::default();
    let dir = registry().into_iter().find(|d| d.name == dir_name).unwrap();
    let mut hits = 0;
    for (i, s) in sample_styles(seed, n).into_iter().enumerate() {
        let before = read_attributes(&cfg, &render(&cfg, &s).image);
        let after = read_attributes(
            &cfg,
            &render(&cfg, &s.shifted(&dir.delta, dir.nominal_scale)).image,
        );
        let b = before.style.as_array();
        let a = after.style.as_array();
        let mut best = 0;
        let mut best_mag = -1.0;
        for (j, attr) in Attribute::ALL.iter().enumerate() {
            let shift = ((a[j] - b[j]) / attr.span()).abs();
            if shift > best_mag {
                best_mag = shift;
                best = j;
            }
        }
        if Attribute::ALL[best] == dir.target_attribute() {
            hits += 1;
        } else if i < 5 {
            eprintln!(
                "miss[{dir_name} #{i}]: argmax {} truth {:?}",
                Attribute::ALL[best].name(),
                s
            );
        }
    }
    hits as f64 / n as f64
}

#[test]
fn round_trip_errors_within_fixture() {
    let fx = fixture();
    let worst = sweep_round_trip(4);
    for (i, attr) in Attribute::ALL.iter().enumerate() {
        let bound = fx.round_trip_max_abs_err[attr.name()];
        assert!(
            worst[i] <= bound,
            "{}: observed {:.4} exceeds fixture {:.4}",
            attr.name(),
            worst[i],
            bound
        );
    }
}

#[test]
fn every_direction_detects_its_own_edit() {
    let fx = fixture();
    for dir in registry() {
        let rate = detection_rate(&dir.name, 400, 20_001);
        assert!(
            rate >= fx.detection_rate_min,
            "{}: detection rate {:.3} below {:.3}",
            dir.name,
            rate,
            fx.detection_rate_min
        );
    }
}

#[test]
fn pair_clamp_fraction_is_bounded() {
    // Edits push some styles past their range top; the renderer clamps
    // those and the fraction stays a minority (delta is ~25% of span).
    let cfg = WorldConfig::default();
    for dir in registry() {
        let pairs = make_pairs(&cfg, 7, 200, &dir);
        let frac = pairs.clamped_edits as f64 / 200.0;
        assert!(frac < 0.35, "{}: clamped fraction {frac:.2}", dir.name);
    }
}

/// Prints sweep maxima and detection rates; run manually to re-derive
/// the fixture numbers.
#[test]
#[ignore]
fn calibrate_oracle_fixture() {
    let worst = sweep_round_trip(4);
    println!("round_trip_max_abs_err (levels=4):");
    for (i, attr) in Attribute::ALL.iter().enumerate() {
        println!("  {:>10}: {:.3e}", attr.name(), worst[i]);
    }
    let worst5 = sweep_round_trip(5);
    println!("round_trip_max_abs_err (levels=5):");
    for (i, attr) in Attribute::ALL.iter().enumerate() {
        println!("  {:>10}: {:.3e}", attr.name(), worst5[i]);
    }
    for dir in registry() {
        println!(
            "detection {:>10}: {:.4}",
            dir.name,
            detection_rate(&dir.name, 400, 20_001)
        );
    }
}
