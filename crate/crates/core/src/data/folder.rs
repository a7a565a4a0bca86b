use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};

use super::{to_level, to_model_domain, Dataset, DatasetManifest, LabeledImage};
use crate::error::{Error, Result};
use crate::nnet::Tensor;

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Files that could not be decoded while loading a folder.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub skipped: Vec<(PathBuf, String)>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Encodes an `[H, W, 3]` tensor in `[-1, 1]` as an 8-bit PNG.
pub fn write_png(path: &Path, pixels: &Tensor) -> Result<()> {
    let (h, w) = match *pixels.shape() {
        [h, w, 3] => (h, w),
        ref s => return Err(Error::shape("write_png", format!("expected [H,W,3], got {s:?}"))),
    };
    let raw: Vec<u8> = pixels.data().iter().map(|&v| to_level(v)).collect();
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("sized buffer");
    img.save_with_format(path, ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Decodes an image file to `[H, W, 3]` in `[-1, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| to_model_domain(b)).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

/// Loads a directory-per-class tree. Labels follow the sorted directory
/// names; undecodable files are skipped and reported; mixed image sizes or
/// non-square images are an error.
pub fn load_image_folder(root: &Path) -> Result<(Dataset, LoadReport)> {
    let mut class_names = Vec::new();
    let mut images = Vec::new();
    let mut report = LoadReport::default();
    let mut size: Option<(usize, usize)> = None;
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let label = class_names.len();
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        for file in sorted_entries(&dir)?.into_iter().filter(|p| p.is_file()) {
            let pixels = match read_image(&file) {
                Ok(t) => t,
                Err(e) => {
                    report.skipped.push((file, e.to_string()));
                    continue;
                }
            };
            let hw = (pixels.shape()[0], pixels.shape()[1]);
            match size {
                None => size = Some(hw),
                Some(s) if s != hw => {
                    return Err(Error::Image {
                        path: file,
                        message: format!("size {}x{} differs from {}x{}", hw.0, hw.1, s.0, s.1),
                    })
                }
                Some(_) => {}
            }
            let rel = file.strip_prefix(root).unwrap_or(&file);
            images.push(LabeledImage {
                pixels,
                label,
                source_id: rel.to_string_lossy().into_owned(),
            });
        }
        class_names.push(name);
    }
    let (h, w) = size.ok_or_else(|| Error::Image {
        path: root.to_path_buf(),
        message: "no readable images found".into(),
    })?;
    if h != w {
        return Err(Error::Image {
            path: root.to_path_buf(),
            message: format!("images are {h}x{w}; square images are required"),
        });
    }
    Ok((
        Dataset {
            images,
            class_names,
            image_size: h,
        },
        report,
    ))
}

/// Writes `root/<class>/<index>.png` for every image plus a manifest.
pub fn save_image_folder(dataset: &Dataset, root: &Path, manifest: &DatasetManifest) -> Result<()> {
    for name in &dataset.class_names {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut next = vec![0usize; dataset.num_classes()];
    for im in &dataset.images {
        let dir = root.join(&dataset.class_names[im.label]);
        write_png(&dir.join(format!("{:05}.png", next[im.label])), &im.pixels)?;
        next[im.label] += 1;
    }
    let text = toml::to_string(manifest).map_err(|e| Error::invalid(e.to_string()))?;
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_toy_dataset;

    #[test]
    fn folder_round_trip_to_eight_bits() {
        let dir = tempfile::tempdir().unwrap();
        let d = make_toy_dataset(3, 8, 4, 5).unwrap();
        save_image_folder(&d, dir.path(), &d.manifest(0, &[1.0])).unwrap();
        fs::write(dir.path().join("green_checker").join("zz_broken.png"), b"not an image").unwrap();
        let (back, report) = load_image_folder(dir.path()).unwrap();
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(back.len(), 12);
        assert_eq!(back.image_size, 8);
        // sorted directory order
        assert_eq!(back.class_names, ["blue_stripes", "green_checker", "red_gradient", "yellow_disk"]);
        let by_name = |ds: &Dataset, name: &str| -> Vec<Tensor> {
            let l = ds.class_names.iter().position(|n| n == name).unwrap();
            ds.images.iter().filter(|i| i.label == l).map(|i| i.pixels.clone()).collect()
        };
        for name in &d.class_names {
            for (a, b) in by_name(&d, name).iter().zip(by_name(&back, name)) {
                assert!(a.max_abs_diff(&b) <= 1.0 / 127.5 / 2.0 + 1e-12);
            }
        }
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let m: DatasetManifest = toml::from_str(&text).unwrap();
        assert_eq!(m.counts, vec![3; 4]);
    }

    #[test]
    fn mixed_sizes_are_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("a")).unwrap();
        write_png(&dir.path().join("a/1.png"), &Tensor::zeros(&[4, 4, 3])).unwrap();
        write_png(&dir.path().join("a/2.png"), &Tensor::zeros(&[8, 8, 3])).unwrap();
        assert!(load_image_folder(dir.path()).is_err());
    }

    #[test]
    fn extreme_levels_map_to_domain_edges() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let t = Tensor::new(&[1, 2, 3], vec![1.0, 1.0, 1.0, -1.0, -1.0, -1.0]).unwrap();
        write_png(&p, &t).unwrap();
        assert_eq!(read_image(&p).unwrap(), t);
    }
}
