//! Pianoroll images: time left to right, low pitches at the bottom.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::{Rgb, RgbImage};
use rollnet::rolls::Pianoroll;

pub const CELL: u32 = 2;
pub const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

pub const PALETTE: [[u8; 3]; 16] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
    [0, 0, 128],
    [128, 0, 0],
    [0, 128, 128],
    [128, 128, 0],
    [64, 0, 64],
    [0, 0, 0],
];

/// Paints active cells; where instruments overlap the lowest index wins.
pub fn render_image(roll: &Pianoroll) -> Result<RgbImage> {
    let (f_n, t_n, m_n) = (roll.n_pitch(), roll.n_frames(), roll.n_instruments());
    if m_n > PALETTE.len() {
        bail!("{m_n} instruments exceed the {}-colour palette", PALETTE.len());
    }
    if !roll.is_binary() {
        bail!("rendering needs a binary roll");
    }
    let mut img = RgbImage::from_pixel(t_n as u32 * CELL, f_n as u32 * CELL, WHITE);
    for t in 0..t_n {
        for f in 0..f_n {
            let Some(m) = (0..m_n).find(|&m| roll.get(f, t, m) > 0.0) else { continue };
            let (x0, y0) = (t as u32 * CELL, (f_n - 1 - f) as u32 * CELL);
            for dy in 0..CELL {
                for dx in 0..CELL {
                    img.put_pixel(x0 + dx, y0 + dy, Rgb(PALETTE[m]));
                }
            }
        }
    }
    Ok(img)
}

pub fn legend_path(png: &Path) -> PathBuf {
    let mut name = png.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".legend.txt");
    png.with_file_name(name)
}

/// Writes the PNG and a `<name>.legend.txt` sidecar mapping colours to instruments.
pub fn render_png(roll: &Pianoroll, names: &[String], out: &Path) -> Result<()> {
    let img = render_image(roll)?;
    img.save_with_format(out, image::ImageFormat::Png).with_context(|| format!("writing {}", out.display()))?;
    let mut legend = String::new();
    for m in 0..roll.n_instruments() {
        let [r, g, b] = PALETTE[m];
        let name = names.get(m).map_or("?", String::as_str);
        let _ = writeln!(legend, "{m}\t{name}\t#{r:02x}{g:02x}{b:02x}");
    }
    fs::write(legend_path(out), legend).context("writing legend")?;
    Ok(())
}
