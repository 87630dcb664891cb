use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::data::template_hash;
use crate::enhancer::{normalize_depth, Enhancer};
use crate::error::{Error, Result};
use crate::gaussians::{gather, CloudVars, SpawnHeads};
use crate::ggo::{apply_offsets, Ggo, TrackingOffsets};
use crate::mesh::{build_hierarchy, SamplingHierarchy, TriMesh};
use crate::render::{render_on_tape, Camera, Intrinsics, PoseVars, WHITE};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::unet::{decode_anchors, encode_mesh, GeometryActivation, GraphUnet, Role};
use crate::util::stream_rng;

/// Background color of every render; ground-truth images share it.
pub const BACKGROUND: [Real; 3] = WHITE;

/// Parameter-name prefixes of the trainable groups.
pub const GROUPS: [(&str, &[&str]); 4] =
    [("unet", &["geo.", "app."]), ("spawn", &["spawn."]), ("ggo", &["ggo."]), ("enhancer", &["enh."])];

/// Shape facts a checkpoint needs besides the config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub vertices: usize,
    pub expr_dim: usize,
    pub intrinsics: Intrinsics,
    /// Hex SHA-256 of the template mesh.
    pub template_hash: String,
    pub scale_bias: Real,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// What a frame needs to be rendered.
#[derive(Clone, Copy, Debug)]
pub struct FrameInput<'a> {
    pub t: Real,
    pub e: &'a [Real],
    pub camera: &'a Camera,
    pub mesh: &'a TriMesh,
}

impl<'a> From<&'a super::data::Frame> for FrameInput<'a> {
    fn from(f: &'a super::data::Frame) -> Self {
        Self { t: f.t, e: &f.e, camera: &f.camera, mesh: &f.mesh }
    }
}

#[derive(Clone, Debug)]
pub struct FrameOutput {
    /// `[3, H, W]` rasterized image.
    pub coarse: Var,
    /// `[3, H, W]` enhanced image (the coarse image when the enhancer is off).
    pub fine: Var,
    /// `[1, H, W]` expected depth.
    pub depth: Var,
    /// `[1, H, W]` accumulated opacity.
    pub weight: Var,
    pub cloud: CloudVars,
    pub offsets: Option<TrackingOffsets>,
    /// Camera actually used, after offsets.
    pub camera: Camera,
}

/// All networks of one avatar plus their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub meta: ModelMeta,
    pub store: ParamStore,
    pub template: TriMesh,
    pub hierarchy: SamplingHierarchy,
    pub act: GeometryActivation,
    pub geo: GraphUnet,
    pub app: GraphUnet,
    pub spawn: Option<SpawnHeads>,
    pub ggo: Option<Ggo>,
    pub enhancer: Option<Enhancer>,
}

impl Model {
    /// Fresh networks for `template`. Every component draws from its own
    /// seeded stream, so ablating one leaves the others' initialization intact.
    pub fn new(config: &TrainConfig, template: &TriMesh, expr_dim: usize, intrinsics: Intrinsics) -> Result<Self> {
        config.validate()?;
        intrinsics.validate()?;
        if config.resolution != 0 && (intrinsics.width != config.resolution || intrinsics.height != config.resolution) {
            return Err(Error::Config(format!(
                "config expects {0}x{0} images, dataset has {1}x{2}",
                config.resolution, intrinsics.width, intrinsics.height
            )));
        }
        if intrinsics.width % 4 != 0 || intrinsics.height % 4 != 0 {
            return Err(Error::Config(format!("image size {}x{} must be divisible by 4", intrinsics.width, intrinsics.height)));
        }
        if config.unet.expr_dim != expr_dim {
            return Err(Error::Config(format!("unet.expr_dim {} but dataset has |e| = {expr_dim}", config.unet.expr_dim)));
        }
        let hierarchy = build_hierarchy(template, config.hierarchy.levels, config.hierarchy.factor)?;
        let mut act = GeometryActivation::for_mesh(template);
        act.scale_bias = (0.5 * template.mean_edge_length()).ln();
        let s = config.seed;
        let mut store = ParamStore::new();
        let geo = GraphUnet::new(&mut store, "geo", Role::Geometry, config.unet.clone(), &hierarchy, &mut stream_rng(s, "geo"))?;
        let app = GraphUnet::new(&mut store, "app", Role::Appearance, config.unet.clone(), &hierarchy, &mut stream_rng(s, "app"))?;
        let spawn_cfg = config.effective_spawn();
        let spawn = if spawn_cfg.k > 0 {
            Some(SpawnHeads::new(&mut store, "spawn", spawn_cfg, template.num_vertices(), expr_dim, &mut stream_rng(s, "spawn")))
        } else {
            None
        };
        let ggo = if config.ablate.no_ggo {
            None
        } else {
            Some(Ggo::new(&mut store, "ggo", config.ggo.clone(), config.unet.bottleneck, expr_dim, &mut stream_rng(s, "ggo"))?)
        };
        let enhancer = if config.ablate.no_enhancer {
            None
        } else {
            Some(Enhancer::new(&mut store, "enh", config.enhancer.clone(), &mut stream_rng(s, "enh"))?)
        };
        let meta = ModelMeta {
            vertices: template.num_vertices(),
            expr_dim,
            intrinsics,
            template_hash: hex(&template_hash(template)),
            scale_bias: act.scale_bias,
        };
        Ok(Self { config: config.clone(), meta, store, template: template.clone(), hierarchy, act, geo, app, spawn, ggo, enhancer })
    }

    /// Parameter ids of a named group (see [`GROUPS`]).
    pub fn group_ids(&self, group: &str) -> Vec<ParamId> {
        let prefixes = GROUPS.iter().find(|(g, _)| *g == group).map(|(_, p)| *p).unwrap_or(&[]);
        self.store.iter().filter(|(_, name, _)| prefixes.iter().any(|p| name.starts_with(p))).map(|(id, _, _)| id).collect()
    }

    /// Groups that exist in this model (ablated components have no parameters).
    pub fn active_groups(&self) -> Vec<&'static str> {
        GROUPS.iter().map(|(g, _)| *g).filter(|g| !self.group_ids(g).is_empty()).collect()
    }

    /// Total Gaussians rendered per frame.
    pub fn gaussians_per_frame(&self) -> usize {
        let k = self.spawn.as_ref().map_or(0, |s| s.config.k);
        self.meta.vertices * (1 + k)
    }

    /// Records the whole frame pipeline on `tape`.
    pub fn forward(&self, tape: &mut Tape, frame: FrameInput<'_>, use_ggo: bool) -> Result<FrameOutput> {
        let store = &self.store;
        if frame.e.len() != self.meta.expr_dim {
            return Err(Error::Shape(format!("frame has {} expression values, model {}", frame.e.len(), self.meta.expr_dim)));
        }
        let intr = frame.camera.intrinsics;
        if intr.width != self.meta.intrinsics.width || intr.height != self.meta.intrinsics.height {
            return Err(Error::Shape("frame resolution differs from the model's".into()));
        }
        let e = tape.constant(Tensor::new(vec![1, frame.e.len()], frame.e.to_vec())?);
        let pose = PoseVars::constant(tape, frame.camera);
        let codes = encode_mesh(tape, store, frame.mesh, &self.geo, &self.app, &self.hierarchy)?;

        let (pose, e, offsets) = match (&self.ggo, use_ggo) {
            (Some(g), true) => {
                let f_t = g.temporal_features(tape, store, frame.t);
                let off = g.predict_offsets(tape, store, codes.f_g, f_t)?;
                let (p, e2) = apply_offsets(tape, &pose, e, &off)?;
                (p, e2, Some(off))
            }
            _ => (pose, e, None),
        };
        let camera = pose_camera(tape, &pose, intr)?;

        let anchors = decode_anchors(tape, store, frame.mesh, &codes, e, &self.geo, &self.app, &self.hierarchy, &self.act)?;
        let neural = match &self.spawn {
            Some(s) => s.spawn(tape, store, &anchors.cloud, camera.center(), e, self.act.scale_max)?,
            None => None,
        };
        let cloud = gather(tape, &anchors.cloud, neural.as_ref())?;
        let bg = tape.constant(Tensor::from_vec(BACKGROUND.to_vec()));
        let r = render_on_tape(tape, &cloud, &pose, &intr, bg)?;
        let fine = match &self.enhancer {
            Some(enh) => {
                let d = normalize_depth(tape, r.depth, intr.near, intr.far)?;
                enh.enhance(tape, store, r.color, d)?
            }
            None => r.color,
        };
        Ok(FrameOutput { coarse: r.color, fine, depth: r.depth, weight: r.weight, cloud, offsets, camera })
    }
}

/// Concrete camera from (possibly corrected) pose variables.
fn pose_camera(tape: &Tape, pose: &PoseVars, intr: Intrinsics) -> Result<Camera> {
    let r = tape.value(pose.rotation).data();
    let m = [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]];
    let t = tape.value(pose.translation).data();
    Camera::new(crate::gaussians::matrix_to_quat(&m), [t[0], t[1], t[2]], intr)
}

