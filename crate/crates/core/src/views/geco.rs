use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenes::{
    caption, paraphrase_positive, parse_caption, positive_image_view, random_edit, render, Image, Paraphraser, Vocab,
};

#[derive(Debug, Clone, PartialEq)]
pub struct GecoRequest {
    pub sample_id: u64,
    pub image: Image,
    pub caption: Vec<u32>,
    pub seed: u64,
}

/// One generated view and a description of how it was made.
#[derive(Debug, Clone, PartialEq)]
pub struct Tagged<T> {
    pub value: T,
    pub edit: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GecoResponse {
    pub positive_image: Option<Tagged<Image>>,
    pub negative_image: Option<Tagged<Image>>,
    pub positive_caption: Option<Tagged<Vec<u32>>>,
    pub negative_caption: Option<Tagged<Vec<u32>>>,
}

pub trait GecoProvider: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, req: &GecoRequest) -> Result<GecoResponse>;
}

/// Exact positives and negatives from the scene grammar: the caption is parsed back to
/// its scene, positives re-render or paraphrase it, negatives apply one semantic edit.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    pub paraphraser: Paraphraser,
    pub images: bool,
    pub captions: bool,
}

impl Default for SyntheticProvider {
    fn default() -> Self {
        Self { paraphraser: Paraphraser::default(), images: true, captions: true }
    }
}

impl GecoProvider for SyntheticProvider {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn generate(&self, req: &GecoRequest) -> Result<GecoResponse> {
        let spec = parse_caption(&req.caption)
            .ok_or_else(|| Error::Provider(format!("sample {}: caption does not parse", req.sample_id)))?;
        let (op, edited) = random_edit(&spec, req.seed);
        let edit = format!("{:?}(target {}, value {})", op.kind, op.target, op.value);
        let size = req.image.height;
        let mut out = GecoResponse::default();
        if self.images {
            let mix = |k: u64| crate::rng::mix(&[req.seed, k]);
            out.positive_image = Some(Tagged { value: positive_image_view(&spec, size, mix(1))?, edit: "rerender".into() });
            out.negative_image = Some(Tagged { value: render(&edited, size, mix(2))?, edit: edit.clone() });
        }
        if self.captions {
            let para = paraphrase_positive(&req.caption, req.seed, &self.paraphraser)?;
            out.positive_caption = Some(Tagged { value: para, edit: "paraphrase".into() });
            out.negative_caption = Some(Tagged { value: caption(&edited, req.seed), edit });
        }
        Ok(out)
    }
}

/// Checks the provider contract and applies it to a request.
pub fn geco_augment(req: &GecoRequest, provider: &dyn GecoProvider) -> Result<GecoResponse> {
    let resp = provider.generate(req)?;
    if let Some(n) = &resp.negative_caption {
        let same_spec = parse_caption(&n.value).is_some() && parse_caption(&n.value) == parse_caption(&req.caption);
        if n.value == req.caption || same_spec {
            return Err(Error::Provider(format!("{}: negative caption keeps the original meaning", provider.name())));
        }
    }
    if let Some(n) = &resp.negative_image {
        if n.value == req.image {
            return Err(Error::Provider(format!("{}: negative image is the unmodified original", provider.name())));
        }
    }
    for img in [&resp.positive_image, &resp.negative_image].into_iter().flatten() {
        if img.value.height != req.image.height || img.value.width != req.image.width {
            return Err(Error::Provider(format!("{}: generated image has the wrong size", provider.name())));
        }
    }
    Ok(resp)
}

#[derive(Serialize, Deserialize)]
struct WireImage {
    height: usize,
    width: usize,
    /// 8-bit RGB, row-major.
    pixels: Vec<u8>,
}

impl WireImage {
    fn from_image(img: &Image) -> Self {
        let pixels = img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Self { height: img.height, width: img.width, pixels }
    }

    fn into_image(self) -> Result<Image> {
        if self.pixels.len() != self.height * self.width * 3 {
            return Err(Error::Provider("image payload has the wrong length".into()));
        }
        Ok(Image { height: self.height, width: self.width, data: self.pixels.iter().map(|&b| b as f32 / 255.0).collect() })
    }
}

#[derive(Serialize)]
struct WireRequest {
    sample_id: u64,
    seed: u64,
    caption: String,
    image: WireImage,
}

#[derive(Deserialize)]
struct WireTagged<T> {
    value: T,
    edit: String,
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    error: Option<String>,
    positive_image: Option<WireTagged<WireImage>>,
    negative_image: Option<WireTagged<WireImage>>,
    positive_caption: Option<WireTagged<String>>,
    negative_caption: Option<WireTagged<String>>,
}

/// A child process speaking one JSON object per line on stdin/stdout.
pub struct ExternalProvider {
    name: String,
    io: Mutex<(Child, ChildStdin, BufReader<ChildStdout>)>,
}

impl ExternalProvider {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Provider(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = BufReader::new(child.stdout.take().expect("piped"));
        Ok(Self { name: program.to_string(), io: Mutex::new((child, stdin, stdout)) })
    }
}

impl Drop for ExternalProvider {
    fn drop(&mut self) {
        if let Ok(io) = self.io.get_mut() {
            let _ = io.0.kill();
            let _ = io.0.wait();
        }
    }
}

impl GecoProvider for ExternalProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, req: &GecoRequest) -> Result<GecoResponse> {
        let vocab = Vocab::shared();
        let fail = |m: String| Error::Provider(format!("{}: {m}", self.name));
        let wire = WireRequest {
            sample_id: req.sample_id,
            seed: req.seed,
            caption: vocab.to_text(&req.caption)?,
            image: WireImage::from_image(&req.image),
        };
        let line = serde_json::to_string(&wire).map_err(|e| fail(e.to_string()))?;
        let mut io = self.io.lock().map_err(|_| fail("provider lock poisoned".into()))?;
        writeln!(io.1, "{line}").and_then(|_| io.1.flush()).map_err(|e| fail(e.to_string()))?;
        let mut reply = String::new();
        if io.2.read_line(&mut reply).map_err(|e| fail(e.to_string()))? == 0 {
            return Err(fail("provider closed its output".into()));
        }
        let r: WireResponse = serde_json::from_str(&reply).map_err(|e| fail(format!("malformed response: {e}")))?;
        if let Some(e) = r.error {
            return Err(fail(e));
        }
        let img = |t: Option<WireTagged<WireImage>>| -> Result<Option<Tagged<Image>>> {
            t.map(|t| Ok(Tagged { value: t.value.into_image()?, edit: t.edit })).transpose()
        };
        let cap = |t: Option<WireTagged<String>>| t.map(|t| Tagged { value: vocab.tokenize(&t.value), edit: t.edit });
        Ok(GecoResponse {
            positive_image: img(r.positive_image)?,
            negative_image: img(r.negative_image)?,
            positive_caption: cap(r.positive_caption),
            negative_caption: cap(r.negative_caption),
        })
    }
}

/// When GeCo views are regenerated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GecoMode {
    /// Fresh views every step.
    Online,
    /// One set of views per sample per epoch.
    Cached,
}

/// Per-epoch response cache; failed requests are remembered as failures.
#[derive(Default)]
pub struct GecoCache {
    epoch: u64,
    entries: HashMap<u64, Option<GecoResponse>>,
}

impl GecoCache {
    pub fn get_or_generate(
        &mut self,
        epoch: u64,
        req: &GecoRequest,
        provider: &dyn GecoProvider,
    ) -> Option<GecoResponse> {
        if epoch != self.epoch {
            self.entries.clear();
            self.epoch = epoch;
        }
        self.entries.entry(req.sample_id).or_insert_with(|| geco_augment(req, provider).ok()).clone()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
