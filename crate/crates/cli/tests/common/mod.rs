//! Brute-force answer oracle working on raw label codes, plus fixtures shared
//! by the CLI test targets.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::Rng;

pub fn cdvqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdvqa"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Binary 8-bit graymap.
pub fn write_pgm(path: &Path, width: usize, height: usize, codes: &[u8]) {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(codes);
    std::fs::write(path, bytes).unwrap();
}

/// Writes one graymap per mask plus a manifest listing them; returns the
/// manifest path.
pub fn write_corpus(dir: &Path, masks: &[(usize, usize, Vec<u8>)]) -> PathBuf {
    let mut entries = Vec::new();
    for (i, (w, h, codes)) in masks.iter().enumerate() {
        let name = format!("scene_{i:04}.pgm");
        write_pgm(&dir.join(&name), *w, *h, codes);
        entries.push(serde_json::json!({
            "image_id": format!("scene_{i:04}"),
            "mask_path": name,
            "region": "test",
        }));
    }
    let manifest = dir.join("manifest.json");
    std::fs::write(&manifest, serde_json::json!({ "entries": entries }).to_string()).unwrap();
    manifest
}

/// Random mask with a random class mix, sometimes with a dense blob of
/// destruction and sometimes without buildings.
pub fn random_mask<R: Rng>(rng: &mut R, min: usize, max: usize) -> (usize, usize, Vec<u8>) {
    let w = rng.random_range(min..=max);
    let h = rng.random_range(min..=max);
    let style = rng.random_range(0..4);
    let mut weights = [0.0f64; 4];
    for v in &mut weights {
        *v = rng.random::<f64>();
    }
    if style == 0 {
        weights[1] = 0.0;
        weights[2] = 0.0;
        weights[3] = 0.0;
    }
    let total: f64 = weights.iter().sum::<f64>().max(1e-12);
    let mut codes: Vec<u8> = (0..w * h)
        .map(|_| {
            let mut r = rng.random::<f64>() * total;
            for (k, &p) in weights.iter().enumerate() {
                if r < p {
                    return k as u8;
                }
                r -= p;
            }
            0
        })
        .collect();
    if style == 1 {
        codes.iter_mut().for_each(|c| {
            if *c >= 2 {
                *c = 1
            }
        });
        let (cx, cy) = (rng.random_range(0..w), rng.random_range(0..h));
        let radius = rng.random_range(1..=(w.min(h) / 3).max(1)) as i64;
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as i64 - cx as i64, y as i64 - cy as i64);
                if dx * dx + dy * dy <= radius * radius {
                    codes[y * w + x] = rng.random_range(2..=3);
                }
            }
        }
    }
    (w, h, codes)
}

fn bucket(p: u64) -> String {
    let k = (p / 10).min(9);
    format!("{}-{}%", 10 * k, 10 * k + 10)
}

fn yn(b: bool) -> String {
    if b { "Yes" } else { "No" }.to_string()
}

/// Expected answer string for every template id, derived from pixels.
pub fn oracle_answers(width: usize, codes: &[u8]) -> BTreeMap<String, String> {
    let mut n = [0u64; 4];
    for &c in codes {
        n[c as usize] += 1;
    }
    let total = codes.len() as u64;
    let buildings = n[1] + n[2] + n[3];
    let affected = n[2] + n[3];
    let os = 100.0 * affected as f64 / total as f64;

    let of_buildings = |count: u64| {
        if buildings == 0 {
            "No buildings".to_string()
        } else {
            bucket(100 * count / buildings)
        }
    };

    let severity = if os <= 0.0 {
        "No damage"
    } else if os < 10.0 {
        "Minor damage"
    } else if os < 30.0 {
        "Moderate damage"
    } else if os < 60.0 {
        "Severe damage"
    } else {
        "Extensive damage"
    };

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, &c) in codes.iter().enumerate() {
        if c == 2 || c == 3 {
            xs.push((i % width) as f64);
            ys.push((i / width) as f64);
        }
    }
    let spatial = if xs.is_empty() {
        "No destruction"
    } else {
        let m = xs.len() as f64;
        let cx = xs.iter().sum::<f64>() / m;
        let cy = ys.iter().sum::<f64>() / m;
        let d: Vec<f64> = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt())
            .collect();
        let mean = d.iter().sum::<f64>() / m;
        let sigma = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m).sqrt();
        let inside = d.iter().filter(|&&v| v < sigma).count() as f64;
        if inside / m > 0.7 {
            "Concentrated in one area"
        } else {
            "Spread throughout"
        }
    };

    let ratio = (buildings > 0).then(|| n[1] as f64 / buildings as f64);
    let resilience = match ratio {
        None => "No buildings".to_string(),
        Some(r) if r >= 0.8 => "High resilience".to_string(),
        Some(r) if r >= 0.5 => "Moderate resilience".to_string(),
        Some(_) => "Low resilience".to_string(),
    };
    let reconstruct = os > 40.0;

    let mut a = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        a.insert(k.to_string(), v);
    };
    put("dd_intact", yn(n[1] > 0));
    put("dd_damaged", yn(n[2] > 0));
    put("dd_destroyed", yn(n[3] > 0));
    put("dd_buildings", yn(buildings > 0));
    put("dd_evidence", yn(affected > 0));
    put("dd_all_intact", yn(n[1] > 0 && affected == 0));
    put("qt_intact_scene", bucket(100 * n[1] / total));
    put("qt_damaged_scene", bucket(100 * n[2] / total));
    put("qt_destroyed_scene", bucket(100 * n[3] / total));
    put("qt_background_scene", bucket(100 * n[0] / total));
    put("qt_intact_buildings", of_buildings(n[1]));
    put("qt_damaged_buildings", of_buildings(n[2]));
    put("qt_destroyed_buildings", of_buildings(n[3]));
    put("qt_building_footprint", bucket(100 * buildings / total));
    put("cp_dominant", if n[2] > n[3] { "Damaged" } else { "Destroyed" }.into());
    put("cp_intact_vs_affected", if n[1] > affected { "Intact" } else { "Affected" }.into());
    put("cp_damaged_gt_destroyed", yn(n[2] > n[3]));
    put("cp_intact_gt_damaged", yn(n[1] > n[2]));
    put("cp_intact_gt_destroyed", yn(n[1] > n[3]));
    put("cp_affected_gt_intact", yn(affected > n[1]));
    put("sv_level", severity.into());
    put("sv_widely", yn(os >= 30.0));
    put("sv_catastrophic", yn(os >= 60.0));
    put("sv_extent", bucket(os.floor() as u64));
    put("sp_pattern", spatial.into());
    put("sp_concentrated", yn(spatial == "Concentrated in one area"));
    put("cx_resilience", resilience);
    put(
        "cx_majority_intact",
        match ratio {
            None => "No buildings".into(),
            Some(r) => yn(r > 0.5),
        },
    );
    put("cx_buildings_present", yn(buildings > 0));
    put("cx_intact_share", of_buildings(n[1]));
    put("th_05", yn(os < 5.0));
    put("th_10", yn(os < 10.0));
    put("th_25", yn(os > 25.0));
    put("th_50", yn(os > 50.0));
    put("th_75", yn(os > 75.0));
    put("th_90", yn(os > 90.0));
    put("rc_reconstruction", yn(reconstruct));
    put("rc_emergency", yn(reconstruct));
    put("rc_habitable", yn(!reconstruct));
    put(
        "rc_response",
        if reconstruct { "Major response" } else { "Minor response" }.into(),
    );
    a
}
