//! Training-curve rendering: the trainer's CSV log to a static PNG.
//!
//! Four stacked panels: losses (total, identity, mask), identity accuracy,
//! mask accuracy, and the learning-rate staircase. Rendering is a pure
//! function of the CSV contents, so re-plotting the same log yields
//! byte-identical files.

use std::fs;
use std::path::Path;

use crate::{Error, Result};

/// Parsed training log columns.
#[derive(Debug, Clone)]
pub struct TrainLog {
    pub steps: Vec<f64>,
    pub lr: Vec<f64>,
    pub loss_total: Vec<f64>,
    pub loss_arcface: Vec<f64>,
    pub loss_mask: Vec<f64>,
    pub id_acc: Vec<f64>,
    pub mask_acc: Vec<f64>,
}

const REQUIRED_COLUMNS: [&str; 7] = [
    "step",
    "lr",
    "loss_total",
    "loss_arcface",
    "loss_mask",
    "id_acc",
    "mask_acc",
];

/// Parse a training log, failing with the name of any missing column.
pub fn parse_log(path: &Path) -> Result<TrainLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Eval(format!("{}: empty log", path.display())))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();

    let mut index = [0usize; 7];
    for (slot, name) in REQUIRED_COLUMNS.iter().enumerate() {
        index[slot] = columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Eval(format!("{}: missing column '{name}'", path.display())))?;
    }

    let mut log = TrainLog {
        steps: Vec::new(),
        lr: Vec::new(),
        loss_total: Vec::new(),
        loss_arcface: Vec::new(),
        loss_mask: Vec::new(),
        id_acc: Vec::new(),
        mask_acc: Vec::new(),
    };
    for (line_no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let get = |slot: usize| -> Result<f64> {
            fields
                .get(index[slot])
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| {
                    Error::Eval(format!(
                        "{}, line {}: bad value in column '{}'",
                        path.display(),
                        line_no + 2,
                        REQUIRED_COLUMNS[slot]
                    ))
                })
        };
        log.steps.push(get(0)?);
        log.lr.push(get(1)?);
        log.loss_total.push(get(2)?);
        log.loss_arcface.push(get(3)?);
        log.loss_mask.push(get(4)?);
        log.id_acc.push(get(5)?);
        log.mask_acc.push(get(6)?);
    }
    if log.steps.is_empty() {
        return Err(Error::Eval(format!(
            "{}: log has no data rows",
            path.display()
        )));
    }
    Ok(log)
}

struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<u8>, // rgb
}

impl Canvas {
    fn new(width: usize, height: usize) -> Canvas {
        Canvas {
            width,
            height,
            pixels: vec![255u8; width * height * 3],
        }
    }

    fn put(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let i = (y as usize * self.width + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, rgb: [u8; 3]) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = x0 + (x1 - x0) * t;
            let y = y0 + (y1 - y0) * t;
            self.put(x.round() as i64, y.round() as i64, rgb);
        }
    }

    fn rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, rgb: [u8; 3]) {
        self.line(x0 as f64, y0 as f64, x1 as f64, y0 as f64, rgb);
        self.line(x0 as f64, y1 as f64, x1 as f64, y1 as f64, rgb);
        self.line(x0 as f64, y0 as f64, x0 as f64, y1 as f64, rgb);
        self.line(x1 as f64, y0 as f64, x1 as f64, y1 as f64, rgb);
    }
}

struct PanelRect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

fn draw_panel(canvas: &mut Canvas, rect: &PanelRect, xs: &[f64], series: &[(&[f64], [u8; 3])]) {
    canvas.rect(rect.x0, rect.y0, rect.x1, rect.y1, [160, 160, 160]);

    let (xmin, xmax) = (xs[0], *xs.last().unwrap());
    let xspan = (xmax - xmin).max(1e-12);
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for (values, _) in series {
        for &v in *values {
            ymin = ymin.min(v);
            ymax = ymax.max(v);
        }
    }
    if !ymin.is_finite() || !ymax.is_finite() {
        return;
    }
    if ymax - ymin < 1e-12 {
        ymax += 1.0;
        ymin -= 1.0;
    }
    let pad = (ymax - ymin) * 0.05;
    let (ymin, ymax) = (ymin - pad, ymax + pad);

    let w = (rect.x1 - rect.x0) as f64;
    let h = (rect.y1 - rect.y0) as f64;
    let to_px = |x: f64, y: f64| -> (f64, f64) {
        (
            rect.x0 as f64 + (x - xmin) / xspan * w,
            rect.y1 as f64 - (y - ymin) / (ymax - ymin) * h,
        )
    };

    // light horizontal gridlines at quarters
    for q in 1..4 {
        let gy = rect.y0 as f64 + h * q as f64 / 4.0;
        canvas.line(rect.x0 as f64, gy, rect.x1 as f64, gy, [232, 232, 232]);
    }

    for (values, color) in series {
        if values.len() == 1 {
            let (px, py) = to_px(xs[0], values[0]);
            canvas.put(px.round() as i64, py.round() as i64, *color);
            continue;
        }
        for i in 1..values.len() {
            let (x0, y0) = to_px(xs[i - 1], values[i - 1]);
            let (x1, y1) = to_px(xs[i], values[i]);
            canvas.line(x0, y0, x1, y1, *color);
        }
    }
}

const LOSS_TOTAL_COLOR: [u8; 3] = [200, 40, 40];
const LOSS_ARC_COLOR: [u8; 3] = [240, 140, 40];
const LOSS_MASK_COLOR: [u8; 3] = [140, 90, 200];
const ID_ACC_COLOR: [u8; 3] = [40, 110, 210];
const MASK_ACC_COLOR: [u8; 3] = [30, 150, 90];
const LR_COLOR: [u8; 3] = [90, 90, 90];

/// Render the four-panel curve image.
pub fn render_curves(log: &TrainLog, out_path: &Path) -> Result<()> {
    let width = 960usize;
    let panel_h = 200usize;
    let margin = 24usize;
    let gap = 18usize;
    let height = margin * 2 + panel_h * 4 + gap * 3;
    let mut canvas = Canvas::new(width, height);

    let panels: [&[(&[f64], [u8; 3])]; 4] = [
        &[
            (&log.loss_total, LOSS_TOTAL_COLOR),
            (&log.loss_arcface, LOSS_ARC_COLOR),
            (&log.loss_mask, LOSS_MASK_COLOR),
        ],
        &[(&log.id_acc, ID_ACC_COLOR)],
        &[(&log.mask_acc, MASK_ACC_COLOR)],
        &[(&log.lr, LR_COLOR)],
    ];
    for (i, series) in panels.iter().enumerate() {
        let y0 = margin + i * (panel_h + gap);
        let rect = PanelRect {
            x0: margin,
            y0,
            x1: width - margin,
            y1: y0 + panel_h,
        };
        draw_panel(&mut canvas, &rect, &log.steps, series);
    }

    let img = image::RgbImage::from_raw(width as u32, height as u32, canvas.pixels)
        .expect("canvas buffer sized correctly");
    img.save(out_path).map_err(|e| Error::Image {
        path: out_path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(())
}

/// Parse a log and render it.
pub fn plot_curves(log_path: &Path, out_path: &Path) -> Result<()> {
    let log = parse_log(log_path)?;
    render_curves(&log, out_path)
}
