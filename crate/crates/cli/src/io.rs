//! Point clouds as CSV and densities from PGM images.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use image::{DynamicImage, ImageReader};
use serde::Deserialize;

use sdot_core::{Density, Point2, PointCloud};

use crate::error::{CliError, Result};

#[derive(Deserialize)]
struct Row {
    x: f64,
    y: f64,
}

pub fn read_points<R: std::io::Read>(reader: R) -> Result<PointCloud> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let Row { x, y } = row?;
        if !(x.is_finite() && y.is_finite()) {
            return Err(CliError::Parse(format!("non-finite point ({x}, {y})")));
        }
        out.push(Point2::new(x, y));
    }
    Ok(PointCloud::new(out))
}

pub fn read_points_csv(path: &Path) -> Result<PointCloud> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_points(BufReader::new(f))
}

/// Header `x,y`, then one point per line with 17 significant digits.
pub fn write_points<W: Write>(writer: W, points: &[Point2]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["x", "y"])?;
    for p in points {
        w.write_record([format!("{:.16e}", p.x), format!("{:.16e}", p.y)])?;
    }
    w.flush().map_err(|e| CliError::io("<csv>", e))?;
    Ok(())
}

pub fn write_points_csv(path: &Path, points: &[Point2]) -> Result<()> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    write_points(f, points)
}

/// Loads an 8-bit grayscale PGM (P2 or P5). Darker pixels carry more mass.
pub fn load_pgm(path: &Path) -> Result<Density> {
    let img = ImageReader::open(path)
        .map_err(|e| CliError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| CliError::io(path, e))?
        .decode()?;
    let DynamicImage::ImageLuma8(gray) = img else {
        return Err(CliError::Parse(format!(
            "{}: expected an 8-bit grayscale PGM",
            path.display()
        )));
    };
    let (w, h) = gray.dimensions();
    Ok(Density::from_image(
        w as usize,
        h as usize,
        gray.as_raw(),
        true,
    )?)
}
