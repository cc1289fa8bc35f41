//! Static plot rendering: CSV line charts and segmentation overlays written
//! as PNG files. Charts carry a sidecar `.legend.txt` naming each series
//! color (no font rasterizer here).

use std::path::Path;

use ndarray::Array3;
use radenc_core::error::{Error, Result};
use radenc_data::png_io::write_png_rgb;

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

struct Canvas {
    img: Array3<u8>,
    w: usize,
    h: usize,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Canvas {
        Canvas {
            img: Array3::from_elem((3, h, w), 255),
            w,
            h,
        }
    }

    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.w as i64 || y >= self.h as i64 {
            return;
        }
        for c in 0..3 {
            self.img[(c, y as usize, x as usize)] = color[c];
        }
    }

    fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = x0 + t * (x1 - x0);
            let y = y0 + t * (y1 - y0);
            self.put(x.round() as i64, y.round() as i64, color);
            self.put(x.round() as i64 + 1, y.round() as i64, color);
        }
    }

    fn rect(&mut self, x: usize, y: usize, w: usize, h: usize, color: [u8; 3]) {
        for i in y..y + h {
            for j in x..x + w {
                self.put(j as i64, i as i64, color);
            }
        }
    }
}

/// Parse a metrics CSV: first row headers, first column the x axis, numeric
/// columns become series (non-numeric cells are skipped point-wise).
pub type ParsedCsv = (Vec<String>, Vec<Vec<Option<f64>>>);

pub fn parse_csv(text: &str) -> Result<ParsedCsv> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::data("empty CSV"))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<Option<f64>> = line
            .split(',')
            .map(|cell| cell.trim().parse::<f64>().ok())
            .collect();
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::data("CSV has no data rows"));
    }
    Ok((header, rows))
}

/// Render every numeric column of a CSV against its first column.
pub fn plot_csv(csv_path: &Path, out_path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(csv_path)
        .map_err(|e| Error::data(format!("csv `{}`: {e}", csv_path.display())))?;
    let (header, rows) = parse_csv(&text)?;
    let n_cols = header.len();

    let xs: Vec<f64> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| r.first().cloned().flatten().unwrap_or(i as f64))
        .collect();

    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for col in 1..n_cols {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.get(col).cloned().flatten().map(|v| (xs[i], v)))
            .filter(|(_, v)| v.is_finite())
            .collect();
        if !pts.is_empty() {
            series.push((header[col].clone(), pts));
        }
    }
    if series.is_empty() {
        return Err(Error::data("no numeric series to plot"));
    }

    let (w, h) = (800usize, 500usize);
    let (ml, mr, mt, mb) = (60.0, 20.0, 20.0, 40.0);
    let mut canvas = Canvas::new(w, h);

    let xmin = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let xmax = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ymin = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.1))
        .fold(f64::INFINITY, f64::min);
    let ymax = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.1))
        .fold(f64::NEG_INFINITY, f64::max);
    let xspan = (xmax - xmin).max(1e-12);
    let yspan = (ymax - ymin).max(1e-12);
    let px = |x: f64| ml + (x - xmin) / xspan * (w as f64 - ml - mr);
    let py = |y: f64| (h as f64 - mb) - (y - ymin) / yspan * (h as f64 - mt - mb);

    // Axes and gridlines.
    let axis = [120u8, 120, 120];
    canvas.line(ml, h as f64 - mb, w as f64 - mr, h as f64 - mb, axis);
    canvas.line(ml, mt, ml, h as f64 - mb, axis);
    for g in 1..5 {
        let y = mt + g as f64 * (h as f64 - mt - mb) / 5.0;
        canvas.line(ml, y, w as f64 - mr, y, [225, 225, 225]);
    }

    let mut legend = String::new();
    for (si, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        for pair in pts.windows(2) {
            canvas.line(px(pair[0].0), py(pair[0].1), px(pair[1].0), py(pair[1].1), color);
        }
        // Legend swatch in the top-right corner.
        canvas.rect(w - 150, 30 + 18 * si, 24, 10, color);
        legend.push_str(&format!(
            "{} = rgb({},{},{})\n",
            name, color[0], color[1], color[2]
        ));
    }
    legend.push_str(&format!(
        "x = {} in [{xmin}, {xmax}]; y in [{ymin}, {ymax}]\n",
        header[0]
    ));

    write_png_rgb(out_path, &canvas.img)?;
    std::fs::write(out_path.with_extension("legend.txt"), legend)?;
    Ok(())
}

/// Blend a class-colored mask over a grayscale image.
pub fn overlay_mask(image_path: &Path, mask_path: &Path, out_path: &Path) -> Result<()> {
    let img = radenc_data::png_io::read_png_image(image_path)?;
    let mask = radenc_data::png_io::read_png_mask(mask_path)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if mask.dim() != (h, w) {
        return Err(Error::data(format!(
            "image {h}x{w} vs mask {:?} size mismatch",
            mask.dim()
        )));
    }
    let alpha = 0.45;
    let mut out = Array3::<u8>::zeros((3, h, w));
    for i in 0..h {
        for j in 0..w {
            let label = mask[(i, j)] as usize;
            for c in 0..3 {
                let base = img[[c, i, j]] * 255.0;
                let v = if label == 0 {
                    base
                } else {
                    let tint = PALETTE[(label - 1) % PALETTE.len()][c] as f64;
                    base * (1.0 - alpha) + tint * alpha
                };
                out[(c, i, j)] = v.clamp(0.0, 255.0) as u8;
            }
        }
    }
    write_png_rgb(out_path, &out)
}
