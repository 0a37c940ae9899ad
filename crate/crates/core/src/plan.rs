//! Raster plan loading and decomposition into overlapping tiles.

use std::path::{Path, PathBuf};

use crate::geom::BoundingBox;

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("cannot read plan image {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("unsupported plan format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid plan image: {0}")]
    InvalidImage(String),
    #[error("invalid tiling: {0}")]
    InvalidTiling(String),
    #[error("box {bbox:?} lies outside the {width}x{height} tile")]
    OutOfTile { bbox: [f64; 4], width: u32, height: u32 },
}

/// 8-bit grayscale raster. Ink is dark, paper is light.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    source_id: String,
}

impl PlanImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>, source_id: impl Into<String>) -> Result<Self, PlanError> {
        if width == 0 || height == 0 {
            return Err(PlanError::InvalidImage(format!("empty {width}x{height} image")));
        }
        if pixels.len() != width as usize * height as usize {
            return Err(PlanError::InvalidImage(format!(
                "{} pixels supplied for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels, source_id: source_id.into() })
    }

    /// A uniformly filled image.
    pub fn filled(width: u32, height: u32, value: u8, source_id: impl Into<String>) -> Result<Self, PlanError> {
        Self::new(width, height, vec![value; width as usize * height as usize], source_id)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    /// The full extent of the image as a box.
    pub fn extent(&self) -> BoundingBox {
        BoundingBox { x_min: 0.0, y_min: 0.0, x_max: self.width as f64, y_max: self.height as f64 }
    }

    /// Copies the `w`x`h` window at `(x0, y0)`. The window must lie inside
    /// the image.
    pub fn crop(&self, x0: u32, y0: u32, w: u32, h: u32) -> PlanImage {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop window out of range");
        let mut pixels = Vec::with_capacity(w as usize * h as usize);
        for y in y0..y0 + h {
            let start = y as usize * self.width as usize + x0 as usize;
            pixels.extend_from_slice(&self.pixels[start..start + w as usize]);
        }
        PlanImage { width: w, height: h, pixels, source_id: self.source_id.clone() }
    }

    pub fn to_gray_image(&self) -> image::GrayImage {
        image::GrayImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("pixel count checked at construction")
    }
}

/// ITU-R BT.601 luma, rounded to the nearest integer.
pub fn luminance(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    y.round().clamp(0.0, 255.0) as u8
}

/// Loads a PNG or JPEG plan as grayscale.
///
/// Colour pixels are reduced with [`luminance`]; partially transparent pixels
/// are composited over white paper first. PDF documents are rejected and must
/// be rasterized beforehand.
pub fn load_plan(path: &Path, dpi_hint: Option<u32>) -> Result<PlanImage, PlanError> {
    let bytes = std::fs::read(path)
        .map_err(|e| PlanError::UnreadableFile { path: path.to_path_buf(), reason: e.to_string() })?;
    if bytes.starts_with(b"%PDF") {
        return Err(PlanError::UnsupportedFormat(format!(
            "{} is a PDF document; rasterize it to PNG first (e.g. `pdftoppm -png -r 300`)",
            path.display()
        )));
    }
    let format = image::guess_format(&bytes)
        .map_err(|_| PlanError::UnsupportedFormat(format!("{}: unrecognized image data", path.display())))?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Jpeg) {
        return Err(PlanError::UnsupportedFormat(format!(
            "{}: {format:?} is not supported, expected PNG or JPEG",
            path.display()
        )));
    }
    let decoded = image::load_from_memory_with_format(&bytes, format)
        .map_err(|e| PlanError::UnreadableFile { path: path.to_path_buf(), reason: e.to_string() })?;
    if let Some(dpi) = dpi_hint {
        log::debug!("{}: dpi hint {dpi}", path.display());
    }
    let rgba = decoded.to_rgba8();
    let (width, height) = rgba.dimensions();
    let pixels = rgba
        .pixels()
        .map(|p| {
            let [r, g, b, a] = p.0;
            let y = luminance(r, g, b);
            if a == 255 {
                y
            } else {
                let alpha = a as f64 / 255.0;
                (y as f64 * alpha + 255.0 * (1.0 - alpha)).round() as u8
            }
        })
        .collect();
    let source_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    PlanImage::new(width, height, pixels, source_id)
}

/// One cutout of a plan together with its placement.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub image: PlanImage,
    pub offset_x: u32,
    pub offset_y: u32,
    pub row: usize,
    pub col: usize,
}

impl Tile {
    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    /// The tile footprint in plan coordinates.
    pub fn plan_extent(&self) -> BoundingBox {
        BoundingBox {
            x_min: self.offset_x as f64,
            y_min: self.offset_y as f64,
            x_max: (self.offset_x + self.width()) as f64,
            y_max: (self.offset_y + self.height()) as f64,
        }
    }
}

/// Tile start positions along one axis. Consecutive tiles advance by
/// `tile - overlap`; the last tile is cropped at the plan edge so every
/// shared edge overlaps by exactly `overlap`.
fn axis_starts(len: u32, tile: u32, overlap: u32) -> Vec<(u32, u32)> {
    let stride = tile - overlap;
    let mut out = Vec::new();
    let mut start = 0u32;
    loop {
        let extent = tile.min(len - start);
        out.push((start, extent));
        if start + tile >= len {
            break;
        }
        start += stride;
    }
    out
}

/// Splits `plan` into a row-major grid of overlapping tiles.
pub fn decompose(plan: &PlanImage, tile_size: u32, overlap: u32) -> Result<Vec<Tile>, PlanError> {
    if tile_size == 0 || tile_size <= overlap.saturating_mul(2) {
        return Err(PlanError::InvalidTiling(format!("tile size {tile_size} must exceed twice the overlap {overlap}")));
    }
    let xs = axis_starts(plan.width(), tile_size, overlap);
    let ys = axis_starts(plan.height(), tile_size, overlap);
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for (row, &(y0, h)) in ys.iter().enumerate() {
        for (col, &(x0, w)) in xs.iter().enumerate() {
            tiles.push(Tile { image: plan.crop(x0, y0, w, h), offset_x: x0, offset_y: y0, row, col });
        }
    }
    Ok(tiles)
}

fn check_in_tile(tile: &Tile, b: &BoundingBox) -> Result<(), PlanError> {
    if b.x_max > tile.width() as f64 || b.y_max > tile.height() as f64 {
        return Err(PlanError::OutOfTile { bbox: b.as_array(), width: tile.width(), height: tile.height() });
    }
    Ok(())
}

/// Maps a box from tile-local to whole-plan coordinates.
pub fn to_plan_coords(tile: &Tile, local: &BoundingBox) -> Result<BoundingBox, PlanError> {
    check_in_tile(tile, local)?;
    Ok(BoundingBox {
        x_min: local.x_min + tile.offset_x as f64,
        y_min: local.y_min + tile.offset_y as f64,
        x_max: local.x_max + tile.offset_x as f64,
        y_max: local.y_max + tile.offset_y as f64,
    })
}

/// Inverse of [`to_plan_coords`].
pub fn to_tile_coords(tile: &Tile, global: &BoundingBox) -> Result<BoundingBox, PlanError> {
    let out_of_tile = || PlanError::OutOfTile { bbox: global.as_array(), width: tile.width(), height: tile.height() };
    let local = global.translate(-(tile.offset_x as f64), -(tile.offset_y as f64)).map_err(|_| out_of_tile())?;
    check_in_tile(tile, &local).map_err(|_| out_of_tile())?;
    Ok(local)
}
