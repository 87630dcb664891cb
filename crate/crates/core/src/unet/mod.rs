//! Chebyshev graph convolutions and the two graph U-nets that turn a tracked
//! mesh plus expression code into per-vertex Gaussian attributes.

mod cheb;

pub use cheb::{cheb_conv, ChebLayer, MAX_CHEB_ORDER};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::CloudVars;
use crate::mesh::{apply_sampling, vertex_normals, SamplingHierarchy, TriMesh};
use crate::nn::Linear;
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};
use crate::util::Rng;

/// Per-vertex input width: position and normal.
pub const INPUT_WIDTH: usize = 6;
pub const GEOMETRY_HEAD: usize = 10;
pub const APPEARANCE_HEAD: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnetConfig {
    pub order: usize,
    /// Feature widths after the first and second encoder convolutions.
    pub widths: [usize; 2],
    pub bottleneck: usize,
    pub expr_dim: usize,
    /// Additive encoder-to-decoder skips at each resolution.
    pub skips: bool,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self { order: 6, widths: [16, 32], bottleneck: 8, expr_dim: 8, skips: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Geometry,
    Appearance,
}

impl Role {
    pub fn head_width(self) -> usize {
        match self {
            Role::Geometry => GEOMETRY_HEAD,
            Role::Appearance => APPEARANCE_HEAD,
        }
    }
}

/// Output activations of the geometry head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryActivation {
    pub max_offset: Real,
    pub scale_max: Real,
    /// Added to the raw scale before `exp`; 0 means a zero head yields unit scale.
    pub scale_bias: Real,
}

impl GeometryActivation {
    /// Offsets up to 5% and scales up to 10% of the bounding-box diagonal.
    pub fn for_mesh(mesh: &TriMesh) -> Self {
        let d = mesh.bbox_diagonal();
        Self { max_offset: 0.05 * d, scale_max: 0.1 * d, scale_bias: 0.0 }
    }
}

pub const MIN_SCALE: Real = 1e-6;

#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[1, bottleneck]`
    pub z: Var,
    /// Post-activation features at full and first coarse resolution.
    pub skips: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct GeometryOut {
    pub offset: Var,
    pub rotation: Var,
    pub scale: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AppearanceOut {
    pub color: Var,
    pub opacity: Var,
}

/// One graph U-net: two Chebyshev encoder stages to an 8-wide code, an
/// expression-conditioned decoder mirroring them, and a per-vertex head.
#[derive(Clone, Debug)]
pub struct GraphUnet {
    pub role: Role,
    pub config: UnetConfig,
    pub sizes: [usize; 3],
    enc: [ChebLayer; 2],
    bottleneck: Linear,
    dec_in: Linear,
    dec: [ChebLayer; 2],
    head: Linear,
}

impl GraphUnet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        role: Role,
        config: UnetConfig,
        hierarchy: &SamplingHierarchy,
        rng: &mut Rng,
    ) -> Result<Self> {
        let sizes = hierarchy.sizes();
        if sizes.len() != 3 {
            return Err(Error::Config(format!(
                "graph U-net needs a two-level hierarchy, got sizes {sizes:?}"
            )));
        }
        let [w1, w2] = config.widths;
        let k = config.order;
        let coarse = sizes[2] * w2;
        let enc = [
            ChebLayer::new(store, &format!("{name}.enc0"), k, INPUT_WIDTH, w1, true, rng)?,
            ChebLayer::new(store, &format!("{name}.enc1"), k, w1, w2, true, rng)?,
        ];
        let bottleneck = Linear::new(store, &format!("{name}.bottleneck"), coarse, config.bottleneck, rng);
        let dec_in = Linear::new(store, &format!("{name}.dec_in"), config.bottleneck + config.expr_dim, coarse, rng);
        let dec = [
            ChebLayer::new(store, &format!("{name}.dec1"), k, w2, w1, true, rng)?,
            ChebLayer::new(store, &format!("{name}.dec0"), k, w1, w1, true, rng)?,
        ];
        let head = Linear::zeros(store, &format!("{name}.head"), w1, role.head_width());
        Ok(Self { role, config, sizes: [sizes[0], sizes[1], sizes[2]], enc, bottleneck, dec_in, dec, head })
    }

    fn check_hierarchy(&self, h: &SamplingHierarchy) -> Result<()> {
        if h.sizes() != self.sizes {
            return Err(Error::Shape(format!(
                "network built for level sizes {:?}, hierarchy has {:?}",
                self.sizes,
                h.sizes()
            )));
        }
        Ok(())
    }

    /// Encodes `[n, 6]` vertex features into `z: [1, 8]`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: &SamplingHierarchy) -> Result<Encoded> {
        self.check_hierarchy(h)?;
        let a0 = cheb_conv(tape, store, x, h.ops(0), &self.enc[0])?;
        let a0 = tape.elu(a0);
        let d0 = apply_sampling(tape, a0, &h.levels[0].down)?;
        let a1 = cheb_conv(tape, store, d0, h.ops(1), &self.enc[1])?;
        let a1 = tape.elu(a1);
        let d1 = apply_sampling(tape, a1, &h.levels[1].down)?;
        let flat = tape.reshape(d1, vec![1, self.sizes[2] * self.config.widths[1]]);
        let z = self.bottleneck.forward(tape, store, flat);
        Ok(Encoded { z, skips: vec![a0, a1] })
    }

    /// Decodes `z: [1, 8]` and `e: [1, |e|]` into raw `[n, head]` outputs.
    pub fn decode_raw(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        e: Var,
        h: &SamplingHierarchy,
        skips: Option<&[Var]>,
    ) -> Result<Var> {
        self.check_hierarchy(h)?;
        if tape.shape(z) != [1, self.config.bottleneck] || tape.shape(e) != [1, self.config.expr_dim] {
            return Err(Error::Shape(format!(
                "decoder expects z [1, {}] and e [1, {}], got {:?} and {:?}",
                self.config.bottleneck,
                self.config.expr_dim,
                tape.shape(z),
                tape.shape(e)
            )));
        }
        let [w1, w2] = self.config.widths;
        let ze = tape.concat(&[z, e], 1);
        let c = self.dec_in.forward(tape, store, ze);
        let c = tape.reshape(c, vec![self.sizes[2], w2]);
        let mut u1 = apply_sampling(tape, c, &h.levels[1].up)?;
        if let (true, Some(s)) = (self.config.skips, skips) {
            u1 = tape.add(u1, s[1]);
        }
        let b1 = cheb_conv(tape, store, u1, h.ops(1), &self.dec[0])?;
        let b1 = tape.elu(b1);
        debug_assert_eq!(tape.shape(b1)[1], w1);
        let mut u0 = apply_sampling(tape, b1, &h.levels[0].up)?;
        if let (true, Some(s)) = (self.config.skips, skips) {
            u0 = tape.add(u0, s[0]);
        }
        let b0 = cheb_conv(tape, store, u0, h.ops(0), &self.dec[1])?;
        let b0 = tape.elu(b0);
        Ok(self.head.forward(tape, store, b0))
    }
}

/// `[n, 6]` position-and-normal features of a mesh.
pub fn vertex_features(mesh: &TriMesh) -> Tensor {
    let normals = vertex_normals(mesh);
    let mut data = Vec::with_capacity(mesh.num_vertices() * INPUT_WIDTH);
    for (v, n) in mesh.vertices.iter().zip(&normals) {
        data.extend_from_slice(v);
        data.extend_from_slice(n);
    }
    Tensor::new(vec![mesh.num_vertices(), INPUT_WIDTH], data).expect("consistent sizes")
}

fn check_finite(tape: &Tape, vars: &[Var], what: &str) -> Result<()> {
    if vars.iter().all(|&v| tape.value(v).is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what} output")))
    }
}

/// Unit quaternions from raw head outputs: `normalize((1,0,0,0) + raw)`.
pub fn quaternion_activation(tape: &mut Tape, raw: Var) -> Var {
    let n = tape.shape(raw)[0];
    let one = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).expect("4 values"));
    let one = tape.broadcast(one, vec![n, 4]);
    let q = tape.add(raw, one);
    tape.normalize_rows(q)
}

/// Geometry head: bounded offsets, unit quaternions, clamped positive scales.
pub fn geometry_activation(tape: &mut Tape, raw: Var, act: &GeometryActivation) -> Result<GeometryOut> {
    let off = tape.slice(raw, 1, 0, 3);
    let off = tape.tanh(off);
    let offset = tape.scale(off, act.max_offset);
    let q = tape.slice(raw, 1, 3, 4);
    let rotation = quaternion_activation(tape, q);
    let s = tape.slice(raw, 1, 7, 3);
    let s = tape.add_scalar(s, act.scale_bias);
    let s = tape.exp(s);
    let scale = tape.clamp(s, MIN_SCALE, act.scale_max);
    check_finite(tape, &[offset, rotation, scale], "geometry")?;
    Ok(GeometryOut { offset, rotation, scale })
}

pub fn appearance_activation(tape: &mut Tape, raw: Var) -> Result<AppearanceOut> {
    let c = tape.slice(raw, 1, 0, 3);
    let color = tape.sigmoid(c);
    let a = tape.slice(raw, 1, 3, 1);
    let opacity = tape.sigmoid(a);
    check_finite(tape, &[color, opacity], "appearance")?;
    Ok(AppearanceOut { color, opacity })
}

/// Anchor Gaussians of one frame plus the bottleneck codes.
#[derive(Clone, Debug)]
pub struct Anchors {
    pub cloud: CloudVars,
    pub z_geo: Var,
    pub z_app: Var,
    /// `[1, 16]`: `z_geo` followed by `z_app`.
    pub f_g: Var,
}

/// Encoder outputs of both U-nets for one mesh.
#[derive(Clone, Debug)]
pub struct MeshCodes {
    pub geo: Encoded,
    pub app: Encoded,
    /// `[1, 16]`: `z_geo` followed by `z_app`.
    pub f_g: Var,
}

/// Encodes `mesh` with both U-nets.
pub fn encode_mesh(
    tape: &mut Tape,
    store: &ParamStore,
    mesh: &TriMesh,
    geo: &GraphUnet,
    app: &GraphUnet,
    h: &SamplingHierarchy,
) -> Result<MeshCodes> {
    if mesh.num_vertices() != geo.sizes[0] || mesh.num_vertices() != app.sizes[0] {
        return Err(Error::Shape(format!(
            "mesh has {} vertices, networks expect {}",
            mesh.num_vertices(),
            geo.sizes[0]
        )));
    }
    let x = tape.constant(vertex_features(mesh));
    let eg = geo.encode(tape, store, x, h)?;
    let ea = app.encode(tape, store, x, h)?;
    let f_g = tape.concat(&[eg.z, ea.z], 1);
    Ok(MeshCodes { geo: eg, app: ea, f_g })
}

/// Decodes anchor Gaussians from encoder codes and expression `e: [1, |e|]`;
/// anchor centers are the mesh vertices displaced by the geometry offsets.
#[allow(clippy::too_many_arguments)]
pub fn decode_anchors(
    tape: &mut Tape,
    store: &ParamStore,
    mesh: &TriMesh,
    codes: &MeshCodes,
    e: Var,
    geo: &GraphUnet,
    app: &GraphUnet,
    h: &SamplingHierarchy,
    act: &GeometryActivation,
) -> Result<Anchors> {
    let rg = geo.decode_raw(tape, store, codes.geo.z, e, h, Some(&codes.geo.skips))?;
    let ra = app.decode_raw(tape, store, codes.app.z, e, h, Some(&codes.app.skips))?;
    let g = geometry_activation(tape, rg, act)?;
    let a = appearance_activation(tape, ra)?;
    let verts = Tensor::new(vec![mesh.num_vertices(), 3], mesh.flat_vertices()).expect("n x 3");
    let verts = tape.constant(verts);
    let centers = tape.add(verts, g.offset);
    Ok(Anchors {
        cloud: CloudVars {
            centers,
            rotations: g.rotation,
            scales: g.scale,
            colors: a.color,
            opacities: a.opacity,
        },
        z_geo: codes.geo.z,
        z_app: codes.app.z,
        f_g: codes.f_g,
    })
}

/// Runs both U-nets on `mesh` with expression `e: [1, |e|]`.
#[allow(clippy::too_many_arguments)]
pub fn generate_anchors(
    tape: &mut Tape,
    store: &ParamStore,
    mesh: &TriMesh,
    e: Var,
    geo: &GraphUnet,
    app: &GraphUnet,
    h: &SamplingHierarchy,
    act: &GeometryActivation,
) -> Result<Anchors> {
    let codes = encode_mesh(tape, store, mesh, geo, app, h)?;
    decode_anchors(tape, store, mesh, &codes, e, geo, app, h, act)
}
