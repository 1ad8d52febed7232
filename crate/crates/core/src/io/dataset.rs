use std::path::{Path, PathBuf};

use super::pfm::{read_pfm, write_pfm};
use super::pnm::{read_mask, read_pnm, write_mask, write_pnm};
use super::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::geometry::{CameraRig, ScalarField};
use crate::imaging::Image;
use crate::scenegen::StereoSample;

pub const MANIFEST_FILE: &str = "manifest.tsv";
/// Baseline disparity, looked up next to the left image of each sample.
pub const BASELINE_FILE: &str = "d_baseline.pfm";

/// File paths of one sample, relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub left: PathBuf,
    pub right: PathBuf,
    pub z_gt: PathBuf,
    pub d_gt: PathBuf,
    pub valid: PathBuf,
}

impl ManifestEntry {
    /// The default file names inside directory `name`.
    pub fn standard(name: &str) -> Self {
        let dir = Path::new(name);
        Self {
            left: dir.join("left.ppm"),
            right: dir.join("right.ppm"),
            z_gt: dir.join("z_gt.pfm"),
            d_gt: dir.join("d_gt.pfm"),
            valid: dir.join("valid.pgm"),
        }
    }

    pub fn sample_dir(&self) -> &Path {
        self.left.parent().unwrap_or(Path::new(""))
    }

    pub fn baseline_path(&self, root: &Path) -> PathBuf {
        root.join(self.sample_dir()).join(BASELINE_FILE)
    }

    fn paths(&self) -> [&Path; 5] {
        [&self.left, &self.right, &self.z_gt, &self.d_gt, &self.valid]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub rig: CameraRig,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn encode(&self) -> Result<String> {
        let mut out = format!(
            "baseline_m\t{}\tfocal_x_px\t{}\n",
            self.rig.baseline_m(),
            self.rig.focal_x_px()
        );
        for e in &self.entries {
            let cols = e
                .paths()
                .iter()
                .map(|p| {
                    p.to_str()
                        .filter(|s| !s.contains(['\t', '\n']))
                        .ok_or_else(|| Error::InvalidParameter(format!("unrepresentable path {}", p.display())))
                })
                .collect::<Result<Vec<_>>>()?;
            out.push_str(&cols.join("\t"));
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        write_atomic(&root.join(MANIFEST_FILE), self.encode()?.as_bytes())
    }

    /// Parse `root/manifest.tsv` and check that every listed file exists.
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = String::from_utf8(read_bytes(&path)?).map_err(|_| bad(&path, "not UTF-8"))?;
        let manifest = Self::decode(&text, &path)?;
        for e in &manifest.entries {
            for p in e.paths() {
                if !root.join(p).is_file() {
                    return Err(bad(&path, format!("listed file {} does not exist", p.display())));
                }
            }
        }
        Ok(manifest)
    }

    fn decode(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or("").split('\t').collect();
        let rig = match header.as_slice() {
            ["baseline_m", b, "focal_x_px", f] => {
                let b = b.parse().map_err(|_| bad(path, "bad baseline_m"))?;
                let f = f.parse().map_err(|_| bad(path, "bad focal_x_px"))?;
                CameraRig::new(b, f)?
            }
            _ => return Err(bad(path, "header must be baseline_m<TAB>b<TAB>focal_x_px<TAB>f")),
        };
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [left, right, z_gt, d_gt, valid] = cols.as_slice() else {
                return Err(bad(path, format!("row {} has {} columns, expected 5", i + 1, cols.len())));
            };
            entries.push(ManifestEntry {
                left: left.into(),
                right: right.into(),
                z_gt: z_gt.into(),
                d_gt: d_gt.into(),
                valid: valid.into(),
            });
        }
        if entries.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { rig, entries })
    }
}

fn bad(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        format: "manifest",
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// One sample loaded for baseline computation, training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub rig: CameraRig,
    pub left: Image,
    pub right: Image,
    pub z_gt: ScalarField,
    pub d_gt: ScalarField,
    /// Ground-truth validity: the mask file and both GT fields agree.
    pub valid: Vec<bool>,
    pub d_baseline: Option<ScalarField>,
}

impl SampleRecord {
    pub fn dims(&self) -> (usize, usize) {
        self.left.dims()
    }

    /// Attach a baseline disparity map, replacing any present one.
    pub fn set_baseline(&mut self, disparity: ScalarField) -> Result<()> {
        if disparity.dims() != self.dims() {
            return Err(Error::DimensionMismatch(format!(
                "baseline disparity is {:?}, sample is {:?}",
                disparity.dims(),
                self.dims()
            )));
        }
        self.d_baseline = Some(disparity);
        Ok(())
    }

    pub fn baseline(&self) -> Result<&ScalarField> {
        self.d_baseline
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("sample has no baseline disparity; run baseline first".into()))
    }
}

impl From<StereoSample> for SampleRecord {
    fn from(s: StereoSample) -> Self {
        let valid = s
            .valid
            .iter()
            .zip(s.z_gt.valid())
            .zip(s.d_gt.valid())
            .map(|((&m, &z), &d)| m && z && d)
            .collect();
        Self {
            rig: s.rig,
            left: s.left,
            right: s.right,
            z_gt: s.z_gt,
            d_gt: s.d_gt,
            valid,
            d_baseline: None,
        }
    }
}

pub fn write_sample(root: &Path, entry: &ManifestEntry, sample: &StereoSample) -> Result<()> {
    let dir = root.join(entry.sample_dir());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let (w, h) = sample.left.dims();
    write_pnm(&sample.left, &root.join(&entry.left))?;
    write_pnm(&sample.right, &root.join(&entry.right))?;
    write_pfm(&sample.z_gt, &root.join(&entry.z_gt))?;
    write_pfm(&sample.d_gt, &root.join(&entry.d_gt))?;
    write_mask(&sample.valid, w, h, &root.join(&entry.valid))
}

/// Load a sample and its baseline disparity if one has been written.
pub fn read_sample(root: &Path, rig: &CameraRig, entry: &ManifestEntry) -> Result<SampleRecord> {
    let left = read_pnm(&root.join(&entry.left))?;
    let right = read_pnm(&root.join(&entry.right))?;
    let z_gt = read_pfm(&root.join(&entry.z_gt))?;
    let d_gt = read_pfm(&root.join(&entry.d_gt))?;
    let (mw, mh, mask) = read_mask(&root.join(&entry.valid))?;
    let dims = left.dims();
    if right.dims() != dims || z_gt.dims() != dims || d_gt.dims() != dims || (mw, mh) != dims {
        return Err(Error::DimensionMismatch(format!(
            "sample {} has inconsistent file sizes",
            entry.sample_dir().display()
        )));
    }
    let valid = mask
        .iter()
        .zip(z_gt.valid())
        .zip(d_gt.valid())
        .map(|((&m, &z), &d)| m && z && d)
        .collect();
    let mut record = SampleRecord {
        rig: *rig,
        left,
        right,
        z_gt,
        d_gt,
        valid,
        d_baseline: None,
    };
    let bpath = entry.baseline_path(root);
    if bpath.is_file() {
        record.set_baseline(read_pfm(&bpath)?)?;
    }
    Ok(record)
}

/// Register an externally computed disparity map as the baseline of a
/// sample. The map must match the sample's image size.
pub fn ingest_external_disparity(root: &Path, entry: &ManifestEntry, pfm_path: &Path) -> Result<ScalarField> {
    let disparity = read_pfm(pfm_path)?;
    let left = read_pnm(&root.join(&entry.left))?;
    if disparity.dims() != left.dims() {
        return Err(Error::DimensionMismatch(format!(
            "{} is {:?}, sample images are {:?}",
            pfm_path.display(),
            disparity.dims(),
            left.dims()
        )));
    }
    write_pfm(&disparity, &entry.baseline_path(root))?;
    Ok(disparity)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_text_round_trips() {
        let m = Manifest {
            rig: CameraRig::new(0.54, 480.0).unwrap(),
            entries: vec![ManifestEntry::standard("sample_00000"), ManifestEntry::standard("sample_00001")],
        };
        let text = m.encode().unwrap();
        assert!(text.starts_with("baseline_m\t0.54\tfocal_x_px\t480\n"));
        assert!(text.contains("sample_00001/left.ppm\tsample_00001/right.ppm"));
        assert_eq!(Manifest::decode(&text, Path::new("m")).unwrap(), m);
    }

    #[test]
    fn bad_manifests_are_rejected() {
        let p = Path::new("m");
        assert!(Manifest::decode("baseline\t1\n", p).is_err());
        assert!(Manifest::decode("baseline_m\t0.5\tfocal_x_px\t100\na\tb\n", p).is_err());
        assert!(matches!(
            Manifest::decode("baseline_m\t0.5\tfocal_x_px\t100\n", p),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn baseline_lives_next_to_the_left_image() {
        let e = ManifestEntry::standard("s");
        assert_eq!(e.baseline_path(Path::new("root")), Path::new("root/s/d_baseline.pfm"));
    }
}
