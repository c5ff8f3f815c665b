use std::path::Path;

use font8x8::{UnicodeFonts, BASIC_FONTS};
use image::{Rgb, RgbImage};

use super::ConfusionMatrix;
use crate::error::{Error, Result};

const SCALE: u32 = 2;
const GLYPH: u32 = 8 * SCALE;
const CELL: u32 = 56;
const PAD: u32 = 12;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([90, 90, 90]);

fn text_width(s: &str) -> u32 {
    s.chars().count() as u32 * GLYPH
}

fn draw_text(img: &mut RgbImage, x: u32, y: u32, s: &str, color: Rgb<u8>) {
    draw_text_scaled(img, x, y, s, color, SCALE);
}

fn draw_text_scaled(img: &mut RgbImage, x: u32, y: u32, s: &str, color: Rgb<u8>, scale: u32) {
    for (i, ch) in s.chars().enumerate() {
        let Some(rows) = BASIC_FONTS.get(ch) else { continue };
        let gx = x + i as u32 * 8 * scale;
        for (ry, bits) in rows.iter().enumerate() {
            for rx in 0..8u32 {
                if bits >> rx & 1 == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let (px, py) = (gx + rx * scale + dx, y + ry as u32 * scale + dy);
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, color);
                        }
                    }
                }
            }
        }
    }
}

/// White to dark blue.
fn shade(fraction: f64) -> Rgb<u8> {
    let f = fraction.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * f).round() as u8;
    Rgb([lerp(247.0, 8.0), lerp(251.0, 48.0), lerp(255.0, 107.0)])
}

struct Layout {
    label_w: u32,
    width: u32,
    height: u32,
}

fn layout(classes: usize, class_names: &[&str], title_len: u32) -> Layout {
    let n = classes as u32;
    let label_w = class_names.iter().map(|s| text_width(s)).max().unwrap_or(0).max(text_width("True")) + PAD;
    let grid = n * CELL;
    let width = (PAD + label_w + grid + PAD).max(title_len + 2 * PAD);
    // title, "True" caption, grid, column names, "Predicted"
    let height = PAD + GLYPH + PAD + GLYPH + 4 + grid + 6 + GLYPH + 6 + GLYPH + PAD;
    Layout { label_w, width, height }
}

fn draw_panel(img: &mut RgbImage, ox: u32, oy: u32, title: &str, cm: &ConfusionMatrix, class_names: &[&str], lay: &Layout) {
    let n = cm.classes() as u32;
    let max = cm.rows().iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    draw_text(img, ox + (lay.width - text_width(title).min(lay.width)) / 2, oy + PAD, title, BLACK);
    let grid_x = ox + PAD + lay.label_w;
    let caption_y = oy + PAD + GLYPH + PAD;
    draw_text(img, ox + PAD, caption_y, "True", BLACK);
    let grid_y = caption_y + GLYPH + 4;
    for t in 0..n {
        let name = class_names.get(t as usize).copied().unwrap_or("?");
        draw_text(img, ox + PAD, grid_y + t * CELL + (CELL - GLYPH) / 2, name, BLACK);
        for p in 0..n {
            let count = cm.get(t as usize, p as usize);
            let frac = count as f64 / max;
            let (x0, y0) = (grid_x + p * CELL, grid_y + t * CELL);
            for y in y0..y0 + CELL {
                for x in x0..x0 + CELL {
                    let edge = x == x0 || y == y0 || x == x0 + CELL - 1 || y == y0 + CELL - 1;
                    img.put_pixel(x, y, if edge { GRID } else { shade(frac) });
                }
            }
            let s = count.to_string();
            let ink = if frac > 0.5 { WHITE } else { BLACK };
            draw_text(img, x0 + (CELL - text_width(&s)) / 2, y0 + (CELL - GLYPH) / 2, &s, ink);
        }
    }
    let names_y = grid_y + n * CELL + 6;
    for p in 0..n {
        let name = class_names.get(p as usize).copied().unwrap_or("?");
        // Names too wide for a cell drop to the small font, then get clipped.
        let (fit, scale) = if text_width(name) <= CELL {
            (name.to_string(), SCALE)
        } else {
            (name.chars().take((CELL / 8) as usize).collect::<String>(), 1)
        };
        let w = fit.chars().count() as u32 * 8 * scale;
        let dy = (GLYPH - 8 * scale) / 2;
        draw_text_scaled(img, grid_x + p * CELL + (CELL - w) / 2, names_y + dy, &fit, BLACK, scale);
    }
    let pred = "Predicted";
    draw_text(img, grid_x + (n * CELL).saturating_sub(text_width(pred)) / 2, names_y + GLYPH + 6, pred, BLACK);
}

/// Heatmap panels with integer annotations, laid out on a near-square grid
/// (four panels give 2x2).
pub fn render_confusion_image(panels: &[(&str, &ConfusionMatrix)], class_names: &[&str]) -> Result<RgbImage> {
    let Some((_, first)) = panels.first() else {
        return Err(Error::Plot("no confusion matrices given".into()));
    };
    let classes = first.classes();
    if panels.iter().any(|(_, cm)| cm.classes() != classes) {
        return Err(Error::Plot("panels have different class counts".into()));
    }
    if class_names.len() != classes {
        return Err(Error::Plot(format!("{} class names for {classes} classes", class_names.len())));
    }
    let title_len = panels.iter().map(|(t, _)| text_width(t)).max().unwrap_or(0);
    let lay = layout(classes, class_names, title_len);
    let cols = (panels.len() as f64).sqrt().ceil() as u32;
    let rows = (panels.len() as u32).div_ceil(cols);
    let mut img = RgbImage::from_pixel(cols * lay.width, rows * lay.height, WHITE);
    for (i, (title, cm)) in panels.iter().enumerate() {
        let (c, r) = (i as u32 % cols, i as u32 / cols);
        draw_panel(&mut img, c * lay.width, r * lay.height, title, cm, class_names, &lay);
    }
    Ok(img)
}

/// Render and write a PNG.
pub fn render_confusion_plot(panels: &[(&str, &ConfusionMatrix)], class_names: &[&str], path: &Path) -> Result<()> {
    let img = render_confusion_image(panels, class_names)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Plot(format!("{}: {e}", path.display())))
}
