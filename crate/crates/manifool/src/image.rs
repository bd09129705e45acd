//! Grayscale raster images, bilinear warping, and the tangent basis of an
//! image's transformation manifold.
//!
//! Pixel coordinates are centered: the continuous point (0, 0) sits at the
//! image center, ((w - 1) / 2, (h - 1) / 2) in array indices. Warping is
//! backward: each output pixel is pulled from the input at the inverse-mapped
//! location with bilinear interpolation and zero padding outside the frame.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Vector3};

use crate::error::{Error, Result};
use crate::group::{exp_map, TangentVector, Transform, TransformGroup};

/// Finite-difference step, in tangent coefficients, used by
/// [`tangent_basis`].
pub const TANGENT_STEP: f64 = 0.05;

/// A grayscale image with f64 pixels in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Image> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParams("image dimensions must be positive".into()));
        }
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("pixels must be finite".into()));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Image {
        Image {
            width: width.max(1),
            height: height.max(1),
            pixels: vec![0.0; width.max(1) * height.max(1)],
        }
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel in centered
    /// coordinates.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(f64, f64) -> f64) -> Image {
        let (cx, cy) = center_of(width, height);
        let mut pixels = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(c as f64 - cx, r as f64 - cy));
            }
        }
        Image {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Array indices of the coordinate origin.
    pub fn center(&self) -> (f64, f64) {
        center_of(self.width, self.height)
    }

    pub fn l2_norm(&self) -> f64 {
        self.pixels.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Euclidean distance between two images of identical dimensions.
    pub fn l2_distance(&self, other: &Image) -> f64 {
        assert_eq!(
            (self.width, self.height),
            (other.width, other.height),
            "mismatched image dimensions"
        );
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(
            (self.width, self.height),
            (other.width, other.height),
            "mismatched image dimensions"
        );
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Backward-warps the image: output pixel p takes the bilinear sample of
    /// the input at `t^-1(p)`. Samples outside the frame read as zero.
    pub fn warp(&self, t: &Transform) -> Result<Image> {
        let inv = t
            .matrix()
            .try_inverse()
            .ok_or_else(|| Error::InvalidParams("transform is not invertible".into()))?;
        let (cx, cy) = self.center();
        let mut out = Vec::with_capacity(self.pixels.len());
        for r in 0..self.height {
            for c in 0..self.width {
                let x = c as f64 - cx;
                let y = r as f64 - cy;
                let q = inv * Vector3::new(x, y, 1.0);
                if q.z.abs() < 1e-12 {
                    return Err(Error::HorizonPoint { x, y });
                }
                out.push(self.bilinear(q.x / q.z + cx, q.y / q.z + cy));
            }
        }
        Ok(Image {
            width: self.width,
            height: self.height,
            pixels: out,
        })
    }

    /// Bilinear sample at array coordinates, zero outside the frame.
    fn bilinear(&self, x: f64, y: f64) -> f64 {
        // Written positively so non-finite coordinates also read as zero;
        // rejecting here keeps the index arithmetic in range.
        if !(x > -1.0 && y > -1.0 && x < self.width as f64 && y < self.height as f64) {
            return 0.0;
        }
        let x0f = x.floor();
        let y0f = y.floor();
        let fx = x - x0f;
        let fy = y - y0f;
        let x0 = x0f as i64;
        let y0 = y0f as i64;
        if fx == 0.0 && fy == 0.0 {
            return self.pixel_or_zero(y0, x0);
        }
        (1.0 - fy) * ((1.0 - fx) * self.pixel_or_zero(y0, x0) + fx * self.pixel_or_zero(y0, x0 + 1))
            + fy * ((1.0 - fx) * self.pixel_or_zero(y0 + 1, x0)
                + fx * self.pixel_or_zero(y0 + 1, x0 + 1))
    }

    fn pixel_or_zero(&self, row: i64, col: i64) -> f64 {
        if row < 0 || col < 0 || row >= self.height as i64 || col >= self.width as i64 {
            0.0
        } else {
            self.pixels[row as usize * self.width + col as usize]
        }
    }

    /// Central-difference spatial gradient, one-sided at the borders.
    /// Returns (d/dx, d/dy). Needs at least 2 pixels along each axis.
    pub fn spatial_gradient(&self) -> (Image, Image) {
        assert!(
            self.width >= 2 && self.height >= 2,
            "gradient needs a 2x2 image or larger"
        );
        let mut gx = vec![0.0; self.pixels.len()];
        let mut gy = vec![0.0; self.pixels.len()];
        for r in 0..self.height {
            for c in 0..self.width {
                let i = r * self.width + c;
                gx[i] = if c == 0 {
                    self.pixel(r, 1) - self.pixel(r, 0)
                } else if c == self.width - 1 {
                    self.pixel(r, c) - self.pixel(r, c - 1)
                } else {
                    0.5 * (self.pixel(r, c + 1) - self.pixel(r, c - 1))
                };
                gy[i] = if r == 0 {
                    self.pixel(1, c) - self.pixel(0, c)
                } else if r == self.height - 1 {
                    self.pixel(r, c) - self.pixel(r - 1, c)
                } else {
                    0.5 * (self.pixel(r + 1, c) - self.pixel(r - 1, c))
                };
            }
        }
        (
            Image {
                width: self.width,
                height: self.height,
                pixels: gx,
            },
            Image {
                width: self.width,
                height: self.height,
                pixels: gy,
            },
        )
    }

    /// Reads a binary (P5) PGM with maxval 255, scaling pixels to [0, 1].
    pub fn read_pgm(reader: &mut impl Read) -> Result<Image> {
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let magic = pgm_token(&bytes, &mut pos)?;
        if magic != b"P5" {
            return Err(Error::Format("not a binary PGM (missing P5 magic)".into()));
        }
        let width = pgm_number(&bytes, &mut pos)?;
        let height = pgm_number(&bytes, &mut pos)?;
        let maxval = pgm_number(&bytes, &mut pos)?;
        if maxval != 255 {
            return Err(Error::Format(format!(
                "unsupported PGM maxval {maxval}, expected 255"
            )));
        }
        // Single whitespace byte separates the header from the raster.
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::Format("malformed PGM header".into()));
        }
        pos += 1;
        let n = width * height;
        if bytes.len() - pos < n {
            return Err(Error::Format("truncated PGM raster".into()));
        }
        let pixels = bytes[pos..pos + n]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        Image::new(width, height, pixels)
    }

    pub fn read_pgm_file(path: impl AsRef<Path>) -> Result<Image> {
        let mut reader = BufReader::new(File::open(path)?);
        Image::read_pgm(&mut reader)
    }

    /// Writes a binary (P5) PGM, clamping pixels to [0, 1] and rounding to
    /// 8 bits.
    pub fn write_pgm(&self, writer: &mut impl Write) -> Result<()> {
        write!(writer, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        writer.write_all(&bytes)?;
        Ok(())
    }

    pub fn write_pgm_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = BufWriter::new(File::create(path)?);
        self.write_pgm(&mut writer)?;
        writer.flush()?;
        Ok(())
    }
}

fn center_of(width: usize, height: usize) -> (f64, f64) {
    ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
}

fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    // Skips whitespace and '#' comment lines before the token.
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("unexpected end of PGM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn pgm_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = pgm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| Error::Format("bad number in PGM header".into()))
}

/// Numerical basis of the tangent space of the transformation manifold
/// `{warp(img, t) : t in group}` at the identity, with the normal-equation
/// factorization needed to project image-space gradients onto it.
pub struct TangentBasis {
    group: TransformGroup,
    pixel_count: usize,
    columns: Vec<Vec<f64>>,
    chol: Cholesky<f64, Dyn>,
}

impl TangentBasis {
    pub fn group(&self) -> TransformGroup {
        self.group
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    /// One basis column per generator, each a flattened image derivative.
    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    /// Least-squares projection of an image-space gradient onto the tangent
    /// space: solves `(J^T J) u = J^T grad` for the coefficients `u`.
    pub fn project(&self, gradient: &[f64]) -> Result<TangentVector> {
        if gradient.len() != self.pixel_count {
            return Err(Error::DimensionMismatch(format!(
                "gradient has {} entries, image has {} pixels",
                gradient.len(),
                self.pixel_count
            )));
        }
        let rhs = DVector::from_iterator(
            self.columns.len(),
            self.columns
                .iter()
                .map(|col| col.iter().zip(gradient).map(|(a, b)| a * b).sum::<f64>()),
        );
        let solution = self.chol.solve(&rhs);
        TangentVector::new(self.group, solution.iter().copied().collect())
    }
}

/// Tangent basis with the default finite-difference step [`TANGENT_STEP`].
pub fn tangent_basis(img: &Image, group: TransformGroup) -> Result<TangentBasis> {
    tangent_basis_with_step(img, group, TANGENT_STEP)
}

/// Central finite differences of the full warp along each generator
/// direction: column j is `(warp(exp(step e_j)) - warp(exp(-step e_j))) /
/// (2 step)` flattened. Fails with [`Error::DegenerateTangent`] when the
/// Gram matrix is rank deficient or has condition number above 1e12.
pub fn tangent_basis_with_step(
    img: &Image,
    group: TransformGroup,
    step: f64,
) -> Result<TangentBasis> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidParams("tangent step must be positive".into()));
    }
    let d = group.dim();
    let n = img.pixels().len();
    let mut columns = Vec::with_capacity(d);
    let mut coeffs = vec![0.0; d];
    for j in 0..d {
        coeffs[j] = step;
        let plus = img.warp(&exp_map(&TangentVector::new(group, coeffs.clone())?))?;
        coeffs[j] = -step;
        let minus = img.warp(&exp_map(&TangentVector::new(group, coeffs.clone())?))?;
        coeffs[j] = 0.0;
        let col: Vec<f64> = plus
            .pixels()
            .iter()
            .zip(minus.pixels())
            .map(|(p, m)| (p - m) / (2.0 * step))
            .collect();
        columns.push(col);
    }
    let mut gram = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            let dot: f64 = columns[i]
                .iter()
                .zip(&columns[j])
                .map(|(a, b)| a * b)
                .sum();
            gram[(i, j)] = dot;
            gram[(j, i)] = dot;
        }
    }
    let eigenvalues = gram.clone().symmetric_eigenvalues();
    let min = eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eigenvalues.iter().cloned().fold(0.0, f64::max);
    if min < 1e-12 || max / min > 1e12 {
        return Err(Error::DegenerateTangent(format!(
            "Gram matrix eigenvalues span [{min:.3e}, {max:.3e}]"
        )));
    }
    let chol = Cholesky::new(gram).ok_or_else(|| {
        Error::DegenerateTangent("Gram matrix is not positive definite".into())
    })?;
    Ok(TangentBasis {
        group,
        pixel_count: n,
        columns,
        chol,
    })
}
