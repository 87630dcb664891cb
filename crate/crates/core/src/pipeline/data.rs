use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mesh::{parse_obj, read_obj, write_obj_string, TriMesh};
use crate::render::{load_mask, load_png, Camera};
use crate::synth::{parse_noise_csv, parse_tracking_csv, FrameNoise, Manifest, Tracking, MANIFEST_VERSION};
use crate::tensor::{Real, Tensor};

/// One tracked frame with its supervision.
#[derive(Clone, Debug)]
pub struct Frame {
    pub index: usize,
    pub t: Real,
    /// Tracked expression code.
    pub e: Vec<Real>,
    /// Tracked camera.
    pub camera: Camera,
    pub mesh: TriMesh,
    /// `[3, H, W]`
    pub image: Tensor,
    /// `[1, H, W]`
    pub mask: Tensor,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub template: TriMesh,
    /// SHA-256 of the template in canonical OBJ form.
    pub template_hash: [u8; 32],
    pub frames: Vec<Frame>,
    /// Ground-truth tracking, when the generator recorded it.
    pub clean: Option<Vec<Tracking>>,
    pub noise: Option<Vec<FrameNoise>>,
}

pub fn template_hash(mesh: &TriMesh) -> [u8; 32] {
    Sha256::digest(write_obj_string(mesh).as_bytes()).into()
}

fn data_err(root: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {msg}", root.display()))
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let mpath = root.join("manifest.json");
        let text = std::fs::read_to_string(&mpath).map_err(|e| data_err(root, format!("cannot read manifest.json ({e})")))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| data_err(root, format!("bad manifest ({e})")))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Version { found: manifest.version, expected: MANIFEST_VERSION });
        }
        let n = manifest.frames;
        if n == 0 || manifest.meshes.len() != n || manifest.images.len() != n || manifest.masks.len() != n {
            return Err(data_err(root, "manifest file lists do not match the frame count"));
        }
        let intr = manifest.intrinsics;
        intr.validate()?;
        if [intr.width, intr.height] != manifest.resolution {
            return Err(data_err(root, "manifest resolution disagrees with intrinsics"));
        }
        let read = |rel: &str| std::fs::read_to_string(root.join(rel)).map_err(|e| data_err(root, format!("{rel}: {e}")));
        let tracks = parse_tracking_csv(&read(&manifest.tracking)?, intr)?;
        if tracks.len() != n {
            return Err(data_err(root, format!("{} tracking rows for {n} frames", tracks.len())));
        }
        let template = parse_obj(&read(&manifest.template)?)?;
        let mut frames = Vec::with_capacity(n);
        for (i, tr) in tracks.into_iter().enumerate() {
            if tr.e.len() != manifest.expr_dim {
                return Err(data_err(root, format!("frame {i}: {} expression values, expected {}", tr.e.len(), manifest.expr_dim)));
            }
            let mesh = read_obj(&root.join(&manifest.meshes[i]))?;
            if mesh.faces != template.faces || mesh.num_vertices() != template.num_vertices() {
                return Err(data_err(root, format!("frame {i}: mesh topology differs from the template")));
            }
            let image = load_png(&root.join(&manifest.images[i])).map_err(|e| data_err(root, format!("frame {i} image: {e}")))?;
            let mask = load_mask(&root.join(&manifest.masks[i])).map_err(|e| data_err(root, format!("frame {i} mask: {e}")))?;
            if image.shape() != [3, intr.height, intr.width] || mask.shape() != [1, intr.height, intr.width] {
                return Err(data_err(root, format!("frame {i}: image or mask size differs from the manifest")));
            }
            frames.push(Frame { index: i, t: tr.t, e: tr.e, camera: tr.camera, mesh, image, mask });
        }
        let clean = match &manifest.clean_tracking {
            Some(rel) => Some(parse_tracking_csv(&read(rel)?, intr)?),
            None => None,
        };
        let noise = match &manifest.noise {
            Some(rel) => Some(parse_noise_csv(&read(rel)?)?),
            None => None,
        };
        Ok(Self { root: root.to_path_buf(), template_hash: template_hash(&template), manifest, template, frames, clean, noise })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn expr_dim(&self) -> usize {
        self.manifest.expr_dim
    }

    /// `(train, test)` frame indices; the last `test_frames` frames are held out.
    pub fn split(&self, test_frames: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if test_frames >= self.len() {
            return Err(Error::Config(format!(
                "cannot hold out {test_frames} of {} frames and still train",
                self.len()
            )));
        }
        let cut = self.len() - test_frames;
        Ok(((0..cut).collect(), (cut..self.len()).collect()))
    }
}
