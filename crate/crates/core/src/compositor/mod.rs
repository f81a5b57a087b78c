//! Layer stacks and straight-alpha compositing.
//!
//! A decomposition is four RGBA layers (line art, flat color, highlight,
//! shadow) that fold back into the source illustration. Colors are straight
//! (non-premultiplied) and blended in the stored color space.
//!
//! Separable modes follow the usual painting-application rule: the mode
//! result is mixed with the top color by the backdrop alpha, then laid over
//! the backdrop with the top alpha. Over an opaque backdrop this reduces to
//! `out = a_t * B(base, top) + (1 - a_t) * base`.

mod image;
mod io;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use self::image::RasterImage;
pub use self::io::{read_manifest, read_png, read_stack_dir, write_png, write_stack_dir, StackManifest};
use crate::error::{Error, Result};

/// Backdrop channel below which multiply conversion is ill-posed.
pub const MULTIPLY_GUARD_EPS: f32 = 1e-3;

/// One 8-bit quantization step.
pub const QUANT_STEP: f32 = 1.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendMode {
    Normal,
    Multiply,
    Lighten,
}

impl BlendMode {
    pub fn tag(self) -> &'static str {
        match self {
            BlendMode::Normal => "normal",
            BlendMode::Multiply => "multiply",
            BlendMode::Lighten => "lighten",
        }
    }

    #[inline]
    fn mix(self, base: f32, top: f32) -> f32 {
        match self {
            BlendMode::Normal => top,
            BlendMode::Multiply => base * top,
            BlendMode::Lighten => base.max(top),
        }
    }
}

impl fmt::Display for BlendMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for BlendMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Ok(BlendMode::Normal),
            "multiply" => Ok(BlendMode::Multiply),
            "lighten" => Ok(BlendMode::Lighten),
            other => Err(Error::Parse(format!("unknown blend mode `{other}`"))),
        }
    }
}

/// Functional layer roles, indexed 1..=4 in packing order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerRole {
    Lineart,
    #[serde(rename = "flat")]
    FlatColor,
    Highlight,
    Shadow,
}

impl LayerRole {
    /// All roles in index order (1 = line art ... 4 = shadow).
    pub const ALL: [LayerRole; 4] = [
        LayerRole::Lineart,
        LayerRole::FlatColor,
        LayerRole::Highlight,
        LayerRole::Shadow,
    ];

    /// Bottom-to-top order used when nothing else is specified.
    pub const DEFAULT_ORDER: [LayerRole; 4] = [
        LayerRole::FlatColor,
        LayerRole::Shadow,
        LayerRole::Highlight,
        LayerRole::Lineart,
    ];

    /// 1-based role index.
    pub fn index(self) -> usize {
        match self {
            LayerRole::Lineart => 1,
            LayerRole::FlatColor => 2,
            LayerRole::Highlight => 3,
            LayerRole::Shadow => 4,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i.checked_sub(1)?).copied()
    }

    pub fn tag(self) -> &'static str {
        match self {
            LayerRole::Lineart => "lineart",
            LayerRole::FlatColor => "flat",
            LayerRole::Highlight => "highlight",
            LayerRole::Shadow => "shadow",
        }
    }

    fn slot(self) -> usize {
        self.index() - 1
    }
}

impl fmt::Display for LayerRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for LayerRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerRole::ALL
            .into_iter()
            .find(|r| r.tag() == s)
            .ok_or_else(|| Error::Parse(format!("unknown layer role `{s}`")))
    }
}

/// Four role-keyed layers with blend modes and a bottom-to-top order.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    layers: [RasterImage; 4],
    modes: [BlendMode; 4],
    order: [LayerRole; 4],
}

impl LayerStack {
    /// All-Normal stack in the default order.
    pub fn new(
        lineart: RasterImage,
        flat: RasterImage,
        highlight: RasterImage,
        shadow: RasterImage,
    ) -> Result<Self> {
        Self::from_layers([lineart, flat, highlight, shadow])
    }

    /// Layers given in role-index order.
    pub fn from_layers(layers: [RasterImage; 4]) -> Result<Self> {
        let dims = layers[0].dims();
        if layers.iter().any(|l| l.dims() != dims) {
            return Err(Error::shape(format!(
                "layer sizes differ: {:?}",
                layers.iter().map(RasterImage::dims).collect::<Vec<_>>()
            )));
        }
        Ok(Self {
            layers,
            modes: [BlendMode::Normal; 4],
            order: LayerRole::DEFAULT_ORDER,
        })
    }

    pub fn with_order(mut self, order: [LayerRole; 4]) -> Result<Self> {
        let mut seen = [false; 4];
        for r in order {
            if std::mem::replace(&mut seen[r.slot()], true) {
                return Err(Error::Config(format!("role {r} repeated in order {order:?}")));
            }
        }
        self.order = order;
        Ok(self)
    }

    pub fn with_mode(mut self, role: LayerRole, mode: BlendMode) -> Self {
        self.modes[role.slot()] = mode;
        self
    }

    pub fn set_mode(&mut self, role: LayerRole, mode: BlendMode) {
        self.modes[role.slot()] = mode;
    }

    pub fn layer(&self, role: LayerRole) -> &RasterImage {
        &self.layers[role.slot()]
    }

    pub fn mode(&self, role: LayerRole) -> BlendMode {
        self.modes[role.slot()]
    }

    pub fn order(&self) -> [LayerRole; 4] {
        self.order
    }

    /// `(height, width)` shared by every layer.
    pub fn dims(&self) -> (usize, usize) {
        self.layers[0].dims()
    }

    /// Layers in role-index order.
    pub fn layers(&self) -> &[RasterImage; 4] {
        &self.layers
    }

    pub fn replace(&mut self, role: LayerRole, image: RasterImage) -> Result<RasterImage> {
        if image.dims() != self.dims() {
            return Err(Error::shape(format!(
                "replacement {:?} for stack {:?}",
                image.dims(),
                self.dims()
            )));
        }
        Ok(std::mem::replace(&mut self.layers[role.slot()], image))
    }

    /// Composite of the layers strictly below `role` in the current order.
    pub fn backdrop_of(&self, role: LayerRole) -> Result<RasterImage> {
        let (h, w) = self.dims();
        let mut canvas = RasterImage::transparent(h, w);
        for r in self.order {
            if r == role {
                break;
            }
            canvas = blend(&canvas, self.layer(r), self.mode(r))?;
        }
        Ok(canvas)
    }
}

#[inline]
fn blend_px(base: [f32; 4], top: [f32; 4], mode: BlendMode) -> [f32; 4] {
    let (ab, at) = (base[3], top[3]);
    if at == 0.0 {
        return base;
    }
    let out_a = at + ab * (1.0 - at);
    let mut out = [0.0, 0.0, 0.0, out_a.clamp(0.0, 1.0)];
    for c in 0..3 {
        let mixed = if ab == 0.0 {
            top[c]
        } else {
            (1.0 - ab) * top[c] + ab * mode.mix(base[c], top[c])
        };
        let v = if at == 1.0 || ab == 0.0 {
            mixed
        } else {
            (at * mixed + (1.0 - at) * ab * base[c]) / out_a
        };
        out[c] = v.clamp(0.0, 1.0);
    }
    out
}

/// Lays `top` over `base` with the given mode.
pub fn blend(base: &RasterImage, top: &RasterImage, mode: BlendMode) -> Result<RasterImage> {
    if base.dims() != top.dims() {
        return Err(Error::shape(format!(
            "blend {:?} with {:?}",
            base.dims(),
            top.dims()
        )));
    }
    let (h, w) = base.dims();
    let mut out = Vec::with_capacity(h * w * 4);
    for (b, t) in base.pixels().chunks_exact(4).zip(top.pixels().chunks_exact(4)) {
        let px = blend_px([b[0], b[1], b[2], b[3]], [t[0], t[1], t[2], t[3]], mode);
        out.extend_from_slice(&px);
    }
    RasterImage::new(h, w, out)
}

/// Folds the stack bottom-to-top onto a transparent canvas.
pub fn recompose(stack: &LayerStack) -> Result<RasterImage> {
    let (h, w) = stack.dims();
    stack.order.iter().try_fold(RasterImage::transparent(h, w), |canvas, &r| {
        blend(&canvas, stack.layer(r), stack.mode(r))
    })
}

/// Multiply-mode layer reproducing a Normal-mode shadow over `base`.
///
/// Where the shadow is present the factor is `shadow / (1 - a_b + a_b * base)`,
/// which is `composite / base` for an opaque backdrop; its alpha is the
/// shadow's alpha. Channels whose denominator is at most
/// [`MULTIPLY_GUARD_EPS`] map to 1.
pub fn normal_to_multiply_shadow(base: &RasterImage, shadow_normal: &RasterImage) -> Result<RasterImage> {
    if base.dims() != shadow_normal.dims() {
        return Err(Error::shape(format!(
            "shadow {:?} over base {:?}",
            shadow_normal.dims(),
            base.dims()
        )));
    }
    let (h, w) = base.dims();
    let mut out = Vec::with_capacity(h * w * 4);
    for (b, s) in base
        .pixels()
        .chunks_exact(4)
        .zip(shadow_normal.pixels().chunks_exact(4))
    {
        let mut px = [1.0, 1.0, 1.0, s[3]];
        if s[3] > 0.0 {
            for c in 0..3 {
                let denom = 1.0 - b[3] + b[3] * b[c];
                if denom > MULTIPLY_GUARD_EPS {
                    px[c] = (s[c] / denom).clamp(0.0, 1.0);
                }
            }
        }
        out.extend_from_slice(&px);
    }
    RasterImage::new(h, w, out)
}

/// Whether channel `c` of a Normal shadow pixel converts exactly to Multiply.
pub fn multiply_convertible(base: [f32; 4], shadow: [f32; 4], c: usize) -> bool {
    let denom = 1.0 - base[3] + base[3] * base[c];
    shadow[3] == 0.0 || (denom > MULTIPLY_GUARD_EPS && shadow[c] <= denom)
}

/// Re-expresses the shadow as Multiply and the highlight as Lighten.
///
/// The highlight layer itself is kept: Lighten reproduces Normal wherever
/// the highlight is at least as bright as what it covers.
pub fn to_multiply_lighten(stack: &LayerStack) -> Result<LayerStack> {
    let mut out = stack.clone();
    let base = stack.backdrop_of(LayerRole::Shadow)?;
    let multiply = normal_to_multiply_shadow(&base, stack.layer(LayerRole::Shadow))?;
    out.replace(LayerRole::Shadow, multiply)?;
    out.set_mode(LayerRole::Shadow, BlendMode::Multiply);
    out.set_mode(LayerRole::Highlight, BlendMode::Lighten);
    Ok(out)
}

/// Recomposes with the flat-color layer swapped out.
pub fn swap_flat_color(stack: &LayerStack, new_flat: &RasterImage) -> Result<RasterImage> {
    let mut swapped = stack.clone();
    swapped.replace(LayerRole::FlatColor, new_flat.clone())?;
    recompose(&swapped)
}
