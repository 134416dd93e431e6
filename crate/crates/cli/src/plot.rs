//! Minimal rasterizer for robustness and loss curves.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use wxdet::dataset::write_png;
use wxdet::scene::ColorImage;
use wxdet::FeatureMap;

const WIDTH: usize = 640;
const HEIGHT: usize = 400;
const MARGIN: f64 = 40.0;

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

pub type Series = (String, Vec<(f64, f64)>);

/// Per-position L2 norm over channels.
pub fn energies(f: &FeatureMap) -> Vec<f64> {
    (0..f.height())
        .flat_map(|y| (0..f.width()).map(move |x| (y, x)))
        .map(|(y, x)| f.at(y, x).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Grayscale energy map, upsampled by `scale` (nearest) and normalized to
/// `[lo, hi]`.
pub fn energy_image(f: &FeatureMap, scale: usize, lo: f64, hi: f64) -> ColorImage {
    let e = energies(f);
    let (h, w) = (f.height() * scale, f.width() * scale);
    let span = (hi - lo).max(1e-12);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let v = ((e[(y / scale) * f.width() + x / scale] - lo) / span).clamp(0.0, 1.0);
            data.extend([v, v, v]);
        }
    }
    ColorImage { height: h, width: w, data }
}

struct Canvas {
    px: Vec<[u8; 3]>,
}

impl Canvas {
    fn new() -> Self {
        Self {
            px: vec![[255; 3]; WIDTH * HEIGHT],
        }
    }

    fn dot(&mut self, x: i64, y: i64, c: [u8; 3], r: i64) {
        for dy in -r..=r {
            for dx in -r..=r {
                let (xx, yy) = (x + dx, y + dy);
                if (0..WIDTH as i64).contains(&xx) && (0..HEIGHT as i64).contains(&yy) {
                    self.px[yy as usize * WIDTH + xx as usize] = c;
                }
            }
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), c: [u8; 3], r: i64) {
        let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let x = a.0 + t * (b.0 - a.0);
            let y = a.1 + t * (b.1 - a.1);
            self.dot(x.round() as i64, y.round() as i64, c, r);
        }
    }

    fn into_image(self) -> ColorImage {
        let data = self.px.iter().flat_map(|p| p.map(|v| v as f64 / 255.0)).collect();
        ColorImage {
            height: HEIGHT,
            width: WIDTH,
            data,
        }
    }
}

/// Draws every series on shared axes; returns the color of each.
pub fn render(series: &[Series], path: &Path) -> Result<Vec<(String, [u8; 3])>> {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.1.iter().copied()).filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
    if pts.is_empty() {
        bail!("nothing to plot");
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    y0 = y0.min(0.0);
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let (pw, ph) = (WIDTH as f64 - 2.0 * MARGIN, HEIGHT as f64 - 2.0 * MARGIN);
    let to_px = |(x, y): (f64, f64)| (MARGIN + (x - x0) / (x1 - x0) * pw, HEIGHT as f64 - MARGIN - (y - y0) / (y1 - y0) * ph);

    let mut c = Canvas::new();
    for i in 0..=10 {
        let f = i as f64 / 10.0;
        let gx = MARGIN + f * pw;
        let gy = MARGIN + f * ph;
        c.line((gx, MARGIN), (gx, HEIGHT as f64 - MARGIN), [225; 3], 0);
        c.line((MARGIN, gy), (WIDTH as f64 - MARGIN, gy), [225; 3], 0);
    }
    let (ox, oy) = (MARGIN, HEIGHT as f64 - MARGIN);
    c.line((ox, oy), (WIDTH as f64 - MARGIN, oy), [0; 3], 0);
    c.line((ox, oy), (ox, MARGIN), [0; 3], 0);

    let mut legend = Vec::new();
    for (i, (name, s)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let s: Vec<_> = s.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).map(to_px).collect();
        for w in s.windows(2) {
            c.line(w[0], w[1], color, 1);
        }
        for &(x, y) in &s {
            c.dot(x.round() as i64, y.round() as i64, color, 2);
        }
        legend.push((name.clone(), color));
    }
    write_png(path, &c.into_image())?;
    Ok(legend)
}

fn num(s: &str) -> Option<f64> {
    s.trim().parse().ok()
}

/// Detects the CSV kind from its header and plots it.
pub fn plot_csv(input: &Path, output: &Path) -> Result<Vec<(String, [u8; 3])>> {
    let mut r = csv::Reader::from_path(input).with_context(|| format!("reading {}", input.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let rows: Vec<csv::StringRecord> = r.records().collect::<std::result::Result<_, _>>()?;
    let col = |name: &str| header.iter().position(|h| h == name);

    let series = if header.iter().any(|h| h.starts_with("mix_")) {
        ablation_series(&header, &rows)
    } else if let (Some(label), Some(frac), Some(metric), Some(diff), Some(ap)) =
        (col("label"), col("clear_fraction"), col("metric"), col("difficulty"), col("ap40"))
    {
        let mut by: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for row in rows.iter().filter(|r| &r[label] == "mixed") {
            if let (Some(f), Some(a)) = (num(&row[frac]), num(&row[ap])) {
                by.entry(format!("{} {}", &row[metric], &row[diff])).or_default().push((f, a));
            }
        }
        by.into_iter().collect()
    } else if let Some(step) = col("step") {
        ["total", "od", "ckr", "wae"]
            .iter()
            .filter_map(|name| {
                let c = col(name)?;
                let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| Some((num(&r[step])?, num(&r[c])?))).collect();
                pts.iter().any(|p| p.1 != 0.0).then(|| (name.to_string(), pts))
            })
            .collect()
    } else {
        bail!("unrecognized CSV layout in {}", input.display());
    };
    render(&series, output)
}

/// Mean robustness curve per (variant, timesteps) over seeds.
fn ablation_series(header: &[String], rows: &[csv::StringRecord]) -> Vec<Series> {
    let mix: Vec<(usize, f64)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| Some((i, h.strip_prefix("mix_")?.parse().ok()?)))
        .collect();
    let mut acc: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for row in rows {
        let vals: Option<Vec<f64>> = mix.iter().map(|&(i, _)| num(row.get(i)?)).collect();
        if let Some(vals) = vals {
            let key = format!("{} T={}", &row[0], &row[1]);
            let e = acc.entry(key).or_insert_with(|| (vec![0.0; mix.len()], 0));
            e.0.iter_mut().zip(&vals).for_each(|(a, v)| *a += v);
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(k, (sum, n))| (k, mix.iter().zip(sum).map(|(&(_, f), s)| (f, s / n as f64)).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energies_are_channel_norms() {
        let f = FeatureMap::new(1, 2, 2, vec![3.0, 4.0, 0.0, 1.0]).unwrap();
        assert_eq!(energies(&f), vec![5.0, 1.0]);
        let img = energy_image(&f, 2, 1.0, 5.0);
        assert_eq!((img.height, img.width), (2, 4));
        assert_eq!(img.data[0], 1.0);
        assert_eq!(img.data[3 * 3], 0.0);
    }

    #[test]
    fn empty_plot_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(render(&[("a".into(), vec![])], &dir.path().join("p.png")).is_err());
    }
}
