//! Figures for a run directory: per-image panels and training curves.
//!
//! Layout read by [`plot_run`]:
//! `images/` input tiles, `attention/` 16-bit attention maps, `instances/`
//! label maps and `log.csv`. Output goes to `figures/`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{FloatMap, Grid};
use crate::postprocess::{segment, PostprocessConfig};
use crate::pngio;
use crate::trainer::{read_log, LogRow, LOG_FILE};

pub const IMAGES_DIR: &str = "images";
pub const ATTENTION_DIR: &str = "attention";
pub const INSTANCES_DIR: &str = "instances";
pub const FIGURES_DIR: &str = "figures";
pub const CURVES_FILE: &str = "curves.svg";

const GAP: usize = 4;
const MARKER: [u8; 3] = [230, 20, 20];

#[derive(Clone, Debug, PartialEq)]
pub struct PlotOutput {
    pub figures: Vec<PathBuf>,
    pub curves: PathBuf,
}

/// Writes one figure per attention map plus the curve plot. Every missing
/// artifact kind is reported at once.
pub fn plot_run(run: &Path, images: Option<&Path>, config: &PostprocessConfig) -> Result<PlotOutput> {
    let images = images.map(Path::to_path_buf).unwrap_or_else(|| run.join(IMAGES_DIR));
    let attention = run.join(ATTENTION_DIR);
    let instances = run.join(INSTANCES_DIR);
    let log = run.join(LOG_FILE);

    let mut missing = Vec::new();
    if !has_png(&images) {
        missing.push(format!("input images ({})", images.display()));
    }
    if !has_png(&attention) {
        missing.push(format!("attention maps ({})", attention.display()));
    }
    if !has_png(&instances) {
        missing.push(format!("instance maps ({})", instances.display()));
    }
    if !log.is_file() {
        missing.push(format!("training log ({})", log.display()));
    }
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }

    let stems: Vec<String> = pngio::list_images(&attention)?
        .iter()
        .map(|p| pngio::file_stem(p))
        .collect();
    let mut missing = Vec::new();
    for stem in &stems {
        for dir in [&images, &instances] {
            let p = dir.join(format!("{stem}.png"));
            if !p.is_file() {
                missing.push(p.display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }

    let out = run.join(FIGURES_DIR);
    std::fs::create_dir_all(&out).map_err(Error::io(&out))?;
    let mut figures = Vec::with_capacity(stems.len());
    for stem in &stems {
        let input = pngio::read_rgb8(images.join(format!("{stem}.png")))?;
        let att = pngio::read_unit_map(attention.join(format!("{stem}.png")))?;
        let labels = pngio::read_labels(instances.join(format!("{stem}.png")))?;
        let figure = four_panel(&input, &att, &labels, config)?;
        let path = out.join(format!("{stem}.png"));
        pngio::write_rgb8(&path, &figure)?;
        figures.push(path);
    }

    let (_, rows) = read_log(&log)?;
    let curves = out.join(CURVES_FILE);
    std::fs::write(&curves, curves_svg(&rows)).map_err(Error::io(&curves))?;
    Ok(PlotOutput { figures, curves })
}

fn has_png(dir: &Path) -> bool {
    dir.is_dir() && pngio::list_images(dir).map(|v| !v.is_empty()).unwrap_or(false)
}

/// input | attention | distance with maxima | instances, side by side.
pub fn four_panel(
    input: &Grid<[u8; 3]>,
    attention: &FloatMap,
    labels: &Grid<u32>,
    config: &PostprocessConfig,
) -> Result<Grid<[u8; 3]>> {
    let (h, w) = (input.height(), input.width());
    if !input.same_shape(attention) || !input.same_shape(labels) {
        return Err(Error::Input("figure panels differ in size".into()));
    }
    let seg = segment(attention, config)?;
    let dmax = seg.markers.distance.data().iter().copied().fold(0.0f32, f32::max).max(1e-6);
    let mut distance = seg.markers.distance.map(|&d| gray(d / dmax));
    for (r, c) in seg.markers.positions() {
        for (dr, dc) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
            let (rr, cc) = (r as isize + dr, c as isize + dc);
            if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                distance[(rr as usize, cc as usize)] = MARKER;
            }
        }
    }
    let panels = [
        input.clone(),
        attention.map(|&a| gray(a)),
        distance,
        labels.map(|&l| label_color(l)),
    ];
    let width = 4 * w + 3 * GAP;
    let mut out = Grid::filled(h, width, [255u8; 3]);
    for (i, panel) in panels.iter().enumerate() {
        let left = i * (w + GAP);
        for (r, c, &p) in panel.indexed() {
            out[(r, left + c)] = p;
        }
    }
    Ok(out)
}

fn gray(v: f32) -> [u8; 3] {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [g, g, g]
}

/// Stable pseudo-random color per label; background is black.
fn label_color(label: u32) -> [u8; 3] {
    if label == 0 {
        return [0, 0, 0];
    }
    let mut x = label.wrapping_mul(0x9E37_79B9);
    x ^= x >> 15;
    x = x.wrapping_mul(0x85EB_CA6B);
    x ^= x >> 13;
    [64 | (x & 0xBF) as u8, 64 | ((x >> 8) & 0xBF) as u8, 64 | ((x >> 16) & 0xBF) as u8]
}

/// One named series per logged quantity, one point per epoch.
pub fn curve_series(rows: &[LogRow]) -> Vec<(&'static str, Vec<(f64, f64)>)> {
    let pick = |f: fn(&LogRow) -> f64| rows.iter().map(|r| (r.epoch as f64, f(r))).collect();
    vec![
        ("scale", pick(|r| r.scale)),
        ("smooth", pick(|r| r.smooth)),
        ("equiv", pick(|r| r.equiv)),
        ("total", pick(|r| r.total)),
        ("val_dice", pick(|r| r.val_dice)),
    ]
}

/// Two stacked plots: losses on top, validation Dice below.
pub fn curves_svg(rows: &[LogRow]) -> String {
    const W: f64 = 640.0;
    const PH: f64 = 220.0;
    const M: f64 = 40.0;
    let colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];
    let series = curve_series(rows);
    let xmax = rows.iter().map(|r| r.epoch).max().unwrap_or(1).max(1) as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{}" font-family="sans-serif" font-size="11">"#,
        2.0 * PH + 3.0 * M
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let panels: [(&str, std::ops::Range<usize>, f64); 2] =
        [("loss", 0..4, M), ("validation Dice", 4..5, 2.0 * M + PH)];
    for (title, range, top) in panels {
        let ymax = series[range.clone()]
            .iter()
            .flat_map(|(_, pts)| pts.iter().map(|p| p.1))
            .filter(|v| v.is_finite())
            .fold(0.0f64, f64::max)
            .max(1e-9);
        let _ = writeln!(
            svg,
            r#"<rect x="{M}" y="{top}" width="{}" height="{PH}" fill="none" stroke="black"/>"#,
            W - 2.0 * M
        );
        let _ = writeln!(svg, r#"<text x="{M}" y="{}">{title} (max {ymax:.4})</text>"#, top - 6.0);
        for (i, (name, pts)) in series[range].iter().enumerate() {
            let color = colors[(i + if title == "loss" { 0 } else { 4 }) % colors.len()];
            let coords: Vec<String> = pts
                .iter()
                .map(|&(x, y)| {
                    let px = M + (x / xmax) * (W - 2.0 * M);
                    let py = top + PH - (y.max(0.0) / ymax) * PH;
                    format!("{px:.2},{py:.2}")
                })
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline class="{name}" fill="none" stroke="{color}" points="{}"/>"#,
                coords.join(" ")
            );
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
                W - M - 70.0,
                top + 14.0 * (i as f64 + 1.0)
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}
