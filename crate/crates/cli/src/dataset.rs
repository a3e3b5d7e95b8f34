//! Directory conventions: every image `NAME.png` (or `.pgm`/`.ppm`) may have
//! a JSON sidecar `NAME.json`. For annotated sets the sidecar is an
//! attribute annotation; for labelled sets it carries `true_label` or
//! `label`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use witness_guard::annotation::AttributeAnnotation;
use witness_guard::detector::LabeledSample;
use witness_guard::image_io::{is_image_path, load_image, to_channels};
use witness_guard::witness::AnnotatedImage;
use witness_guard::Tensor;

pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.is_file() && is_image_path(p));
    paths.sort();
    if paths.is_empty() {
        bail!("no images in {}", dir.display());
    }
    Ok(paths)
}

pub fn load_input(path: &Path, channels: usize) -> Result<Tensor> {
    let img = load_image(path).with_context(|| format!("loading image {}", path.display()))?;
    to_channels(img, channels).with_context(|| format!("converting {}", path.display()))
}

pub fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn load_annotated(dir: &Path, channels: usize) -> Result<Vec<AnnotatedImage>> {
    list_images(dir)?
        .into_iter()
        .map(|p| {
            let image = load_input(&p, channels)?;
            let ann_path = sidecar(&p);
            let annotation = AttributeAnnotation::load(&ann_path)
                .with_context(|| format!("loading annotation {}", ann_path.display()))?;
            let (_, h, w) = image.dims_3d()?;
            annotation.validate(w, h)?;
            Ok(AnnotatedImage { image, annotation })
        })
        .collect()
}

pub fn load_labeled(dir: &Path, channels: usize) -> Result<Vec<LabeledSample>> {
    list_images(dir)?
        .into_iter()
        .map(|p| {
            let image = load_input(&p, channels)?;
            let side = sidecar(&p);
            let doc: serde_json::Value = serde_json::from_slice(
                &std::fs::read(&side).with_context(|| format!("reading {}", side.display()))?,
            )
            .with_context(|| format!("parsing {}", side.display()))?;
            let label = ["true_label", "label"]
                .iter()
                .find_map(|k| doc.get(k).and_then(|v| v.as_u64()))
                .with_context(|| format!("{} has no `true_label` or `label`", side.display()))?;
            Ok(LabeledSample { id: stem(&p), image, true_label: label as usize })
        })
        .collect()
}
