#![allow(dead_code)]

pub mod oracles;

use std::path::Path;
use std::process::{Command, Output};

use capl_kit::{InstanceLabelMap, SeedStream};
use rand::Rng;

pub fn capl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_capl"))
}

/// Runs `capl` with `args`; CAPL_SEED is cleared so tests are not affected
/// by the caller's environment.
pub fn run(args: &[&str]) -> Output {
    capl().args(args).env_remove("CAPL_SEED").output().expect("capl runs")
}

pub fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn paint_ellipse(l: &mut [u32], size: usize, id: u32, cr: f64, cc: f64, ar: f64, ac: f64, overwrite: bool) {
    for r in 0..size {
        for c in 0..size {
            let (dr, dc) = ((r as f64 - cr) / ar, (c as f64 - cc) / ac);
            if dr * dr + dc * dc <= 1.0 && (overwrite || l[r * size + c] == 0) {
                l[r * size + c] = id;
            }
        }
    }
}

/// Pixels of different instances that share an edge, counted once per
/// pixel of the lower label.
pub fn contact_px(m: &InstanceLabelMap) -> usize {
    let (h, w) = (m.height(), m.width());
    let mut n = 0;
    for r in 0..h {
        for c in 0..w {
            let a = m.get(r, c);
            if a == 0 {
                continue;
            }
            let touches = [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)].iter().any(|&(dr, dc)| {
                let (r2, c2) = (r as i64 + dr, c as i64 + dc);
                r2 >= 0 && c2 >= 0 && (r2 as usize) < h && (c2 as usize) < w && {
                    let b = m.get(r2 as usize, c2 as usize);
                    b != 0 && b > a
                }
            });
            n += touches as usize;
        }
    }
    n
}

/// Several ellipses with at least two background pixels between any two.
pub fn separated_layout(seed: u64) -> InstanceLabelMap {
    let size = 48;
    let mut rng = SeedStream::new(seed).named("separated").rng();
    let mut l = vec![0u32; size * size];
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    let mut id = 0;
    for _ in 0..200 {
        let (ar, ac): (f64, f64) = (rng.gen_range(2.5..5.5), rng.gen_range(2.5..5.5));
        let reach = ar.max(ac);
        let (cr, cc) = (rng.gen_range(reach..size as f64 - reach - 1.0), rng.gen_range(reach..size as f64 - reach - 1.0));
        if placed.iter().all(|&(r, c, e)| ((r - cr).powi(2) + (c - cc).powi(2)).sqrt() > e + reach + 3.0) {
            id += 1;
            paint_ellipse(&mut l, size, id, cr, cc, ar, ac, false);
            placed.push((cr, cc, reach));
        }
        if id == 8 {
            break;
        }
    }
    InstanceLabelMap::new(size, size, l).unwrap().relabel_canonical()
}

/// Two nuclei side by side whose shared boundary is between one and three
/// pixels long.
pub fn touching_layout(seed: u64) -> InstanceLabelMap {
    let size = 32;
    let mut rng = SeedStream::new(seed).named("touching").rng();
    loop {
        let (r1, r2) = (rng.gen_range(3.0..6.0), rng.gen_range(3.0..6.0));
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let d = r1 + r2 + rng.gen_range(-0.6..0.4);
        let (cr, cc) = (15.5 - angle.sin() * d / 2.0, 15.5 - angle.cos() * d / 2.0);
        let mut l = vec![0u32; size * size];
        paint_ellipse(&mut l, size, 1, cr, cc, r1, r1, false);
        paint_ellipse(&mut l, size, 2, cr + angle.sin() * d, cc + angle.cos() * d, r2, r2, false);
        let m = InstanceLabelMap::new(size, size, l).unwrap().relabel_canonical();
        if m.instance_ids().len() == 2 && (1..=3).contains(&contact_px(&m)) {
            return m;
        }
    }
}
