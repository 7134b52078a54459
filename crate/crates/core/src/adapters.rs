//! Segmenter and deblurrer interfaces. Built-in kinds run in-process; the
//! `External` kind shells out to a model server through a file protocol:
//!
//! * the client writes `request.png` and `request.json` into a scratch
//!   directory; the JSON holds `{"kind", "input", "output", "params"}`;
//! * it runs `<command> <args...> <request.json>`;
//! * the backend writes `output` (RGB PNG for deblurring, 16-bit grayscale
//!   PNG of segment ids for segmentation) with the input's dimensions and
//!   exits with status 0.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur, FloatImage};
use crate::map::SegmentMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalConfig {
    pub command: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub retries: u32,
    /// Forwarded verbatim to the backend.
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

fn default_timeout_ms() -> u64 {
    60_000
}

/// Subprocess client; calls through one handle are serialised.
#[derive(Debug)]
pub struct ExternalBackend {
    config: ExternalConfig,
    lock: Mutex<()>,
}

static SCRATCH_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ExternalBackend {
    pub fn config(&self) -> &ExternalConfig {
        &self.config
    }

    pub fn new(config: ExternalConfig) -> Self {
        Self {
            config,
            lock: Mutex::new(()),
        }
    }

    fn scratch_dir() -> Result<PathBuf> {
        let n = SCRATCH_COUNTER.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!("crossia-backend-{}-{n}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn run_once(&self, request: &Path) -> Result<()> {
        let mut child = Command::new(&self.config.command)
            .args(&self.config.args)
            .arg(request)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot start {}: {e}", self.config.command.display())))?;
        let deadline = Instant::now() + Duration::from_millis(self.config.timeout_ms);
        loop {
            match child.try_wait() {
                Ok(Some(status)) if status.success() => return Ok(()),
                Ok(Some(status)) => {
                    let mut stderr = String::new();
                    if let Some(mut s) = child.stderr.take() {
                        use std::io::Read;
                        let _ = s.read_to_string(&mut stderr);
                    }
                    return Err(Error::Backend(format!(
                        "{} exited with {status}: {}",
                        self.config.command.display(),
                        stderr.trim()
                    )));
                }
                Ok(None) if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(Error::Backend(format!(
                        "{} timed out after {} ms",
                        self.config.command.display(),
                        self.config.timeout_ms
                    )));
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(Error::Backend(format!("waiting for backend: {e}"))),
            }
        }
    }

    /// Sends one image, returns the path of the backend's output file inside
    /// a scratch directory owned by the caller.
    fn call(&self, kind: &str, rgb: &RgbImage) -> Result<(PathBuf, PathBuf)> {
        let _guard = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        let dir = Self::scratch_dir()?;
        let input = dir.join("request.png");
        let output = dir.join("response.png");
        rgb.save(&input)?;
        let request = serde_json::json!({
            "kind": kind,
            "input": input,
            "output": output,
            "params": self.config.params,
        });
        let request_path = dir.join("request.json");
        std::fs::write(&request_path, serde_json::to_vec_pretty(&request)?)
            .map_err(|e| Error::io(&request_path, e))?;
        let mut last = None;
        for _ in 0..=self.config.retries {
            match self.run_once(&request_path) {
                Ok(()) if output.exists() => return Ok((dir, output)),
                Ok(()) => last = Some(Error::Backend("backend produced no output image".into())),
                Err(e) => last = Some(e),
            }
        }
        let _ = std::fs::remove_dir_all(&dir);
        Err(last.expect("at least one attempt"))
    }
}

#[derive(Debug)]
pub enum Segmenter {
    /// Returns the renderer's ground-truth mask verbatim.
    Oracle,
    External(ExternalBackend),
}

impl Segmenter {
    pub fn segment(&self, rgb: &RgbImage, gt_mask: Option<&SegmentMask>) -> Result<SegmentMask> {
        match self {
            Segmenter::Oracle => {
                let gt = gt_mask.ok_or_else(|| Error::invalid("oracle segmenter needs a ground-truth mask"))?;
                if gt.dims() != (rgb.width() as usize, rgb.height() as usize) {
                    return Err(Error::invalid("ground-truth mask does not match the image"));
                }
                Ok(gt.clone())
            }
            Segmenter::External(backend) => {
                let (dir, out) = backend.call("segment", rgb)?;
                let decoded = image::open(&out).map(|i| i.into_luma16());
                let _ = std::fs::remove_dir_all(&dir);
                let mask = SegmentMask::from_u16_image(&decoded?);
                if mask.dims() != (rgb.width() as usize, rgb.height() as usize) {
                    return Err(Error::Backend("segmentation has wrong dimensions".into()));
                }
                Ok(mask)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnsharpParams {
    pub sigma: f64,
    /// Odd kernel width.
    pub kernel: usize,
    pub amount: f64,
}

impl Default for UnsharpParams {
    fn default() -> Self {
        Self {
            sigma: 2.0,
            kernel: 9,
            amount: 1.0,
        }
    }
}

#[derive(Debug)]
pub enum Deblurrer {
    Identity,
    Unsharp(UnsharpParams),
    External(ExternalBackend),
}

impl Deblurrer {
    /// Short stable description, used to key cached results.
    pub fn tag(&self) -> String {
        match self {
            Deblurrer::Identity => "identity".into(),
            Deblurrer::Unsharp(p) => format!("unsharp:{}:{}:{}", p.sigma, p.kernel, p.amount),
            Deblurrer::External(b) => format!("external:{}", b.config().command.display()),
        }
    }

    pub fn deblur(&self, rgb: &RgbImage) -> Result<RgbImage> {
        match self {
            Deblurrer::Identity => Ok(rgb.clone()),
            Deblurrer::Unsharp(p) => {
                if p.kernel % 2 == 0 {
                    return Err(Error::invalid("unsharp kernel must be odd"));
                }
                Ok(unsharp_mask(rgb, p))
            }
            Deblurrer::External(backend) => {
                let (dir, out) = backend.call("deblur", rgb)?;
                let decoded = image::open(&out).map(|i| i.into_rgb8());
                let _ = std::fs::remove_dir_all(&dir);
                let img = decoded?;
                if img.dimensions() != rgb.dimensions() {
                    return Err(Error::Backend("deblurred image has wrong dimensions".into()));
                }
                Ok(img)
            }
        }
    }
}

/// `x + amount * (x - blur(x))`.
pub fn unsharp_mask(rgb: &RgbImage, p: &UnsharpParams) -> RgbImage {
    let src = FloatImage::from_rgb(rgb);
    let blurred = gaussian_blur(&src, p.sigma, p.kernel);
    let data = src
        .data
        .iter()
        .zip(&blurred.data)
        .map(|(x, b)| x + p.amount * (x - b))
        .collect();
    FloatImage { data, ..src }.to_rgb()
}
