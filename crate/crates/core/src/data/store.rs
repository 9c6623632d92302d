//! Dataset directories: `rgb/`, `depth/` and `label/` subdirectories holding
//! `<index:06d>.ppm`/`.pgm`/`.pgm` plus a manifest listing one index per line.

use std::fs;
use std::path::{Path, PathBuf};

use super::pnm::{
    read_pgm16_depth, read_pgm8_labels, read_ppm_rgb, write_pgm16_depth, write_pgm8_labels,
    write_ppm_rgb,
};
use super::Scene;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";

fn paths(root: &Path, index: usize) -> [PathBuf; 3] {
    [
        root.join("rgb").join(format!("{index:06}.ppm")),
        root.join("depth").join(format!("{index:06}.pgm")),
        root.join("label").join(format!("{index:06}.pgm")),
    ]
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(root: &Path, scenes: &[Scene]) -> Result<()> {
    for sub in ["rgb", "depth", "label"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut manifest = String::new();
    for (i, s) in scenes.iter().enumerate() {
        let [rgb, depth, label] = paths(root, i);
        let mut buf = Vec::new();
        write_ppm_rgb(&mut buf, &s.rgb)?;
        write_file(&rgb, &buf)?;
        buf.clear();
        write_pgm16_depth(&mut buf, &s.depth)?;
        write_file(&depth, &buf)?;
        buf.clear();
        write_pgm8_labels(&mut buf, &s.labels)?;
        write_file(&label, &buf)?;
        manifest.push_str(&format!("{i}\n"));
    }
    write_file(&root.join(MANIFEST), manifest.as_bytes())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Attaches the failing file to format errors.
fn in_file<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        Error::Data(m) | Error::Shape(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn read_dataset(root: &Path) -> Result<Vec<Scene>> {
    let manifest_path = root.join(MANIFEST);
    let text = read_file(&manifest_path)?;
    let text = String::from_utf8(text).map_err(|e| Error::Format {
        offset: e.utf8_error().valid_up_to(),
        message: format!("{}: manifest is not UTF-8", manifest_path.display()),
    })?;
    let mut scenes = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let entry = line.trim();
        if !entry.is_empty() {
            let index: usize = entry.parse().map_err(|_| Error::Format {
                offset,
                message: format!("{}: bad index {entry:?}", manifest_path.display()),
            })?;
            let [rgb_p, depth_p, label_p] = paths(root, index);
            let rgb = in_file(&rgb_p, read_ppm_rgb(&read_file(&rgb_p)?))?;
            let depth = in_file(&depth_p, read_pgm16_depth(&read_file(&depth_p)?))?;
            let labels = in_file(&label_p, read_pgm8_labels(&read_file(&label_p)?))?;
            scenes.push(in_file(&rgb_p, Scene::new(rgb, depth, labels))?);
        }
        offset += line.len();
    }
    if scenes.is_empty() {
        return Err(Error::Data(format!(
            "{} lists no images",
            manifest_path.display()
        )));
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};

    #[test]
    fn round_trip_modulo_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            num_images: 3,
            height: 12,
            width: 10,
            hole_prob: 0.05,
            depth_noise: 0.01,
            ..DatasetSpec::default()
        };
        let scenes = generate(&spec).unwrap();
        write_dataset(dir.path(), &scenes).unwrap();
        let files = ["rgb", "depth", "label"]
            .iter()
            .map(|d| fs::read_dir(dir.path().join(d)).unwrap().count())
            .sum::<usize>();
        assert_eq!(files, 9);
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in scenes.iter().zip(&back) {
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.depth.mask(), b.depth.mask());
            for (x, y) in a.depth.values().iter().zip(b.depth.values()) {
                assert!((x - y).abs() <= 0.0005 + 1e-12);
            }
            for (x, y) in a.rgb.data().iter().zip(b.rgb.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn missing_directory_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        match read_dataset(&dir.path().join("nope")) {
            Err(Error::Io { path, .. }) => assert!(path.ends_with(MANIFEST)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_manifest_line_offset() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST), "0\nabc\n").unwrap();
        let scenes = generate(&DatasetSpec {
            num_images: 1,
            height: 4,
            width: 4,
            ..DatasetSpec::default()
        })
        .unwrap();
        write_dataset(&dir.path().join("x"), &scenes).unwrap();
        // Manifest points at a directory without images for index 0.
        assert!(matches!(read_dataset(dir.path()), Err(Error::Io { .. })));
        fs::write(dir.path().join("x").join(MANIFEST), "0\nabc\n").unwrap();
        assert!(matches!(
            read_dataset(&dir.path().join("x")),
            Err(Error::Format { offset: 2, .. })
        ));
    }
}
