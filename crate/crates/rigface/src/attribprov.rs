//! Spatial attribute provider: builds the three disentangled conditions
//! that drive the denoiser.
//!
//! * rendering — a shaded head at the requested pose and lighting,
//!   pixel-aligned with the edit target;
//! * background — the image whose foreground region is filled with exact
//!   mid-gray, telling the model what to keep;
//! * expression — the coefficient vector ψ.
//!
//! During training every condition comes from the target image of a pair and
//! the gray fill covers the union of the source and target head masks. At
//! inference the background comes from the identity (source) image: pose
//! edits still fill the mask union (the head moves, so both the old and new
//! head regions must be repainted), while expression and lighting edits fill
//! only the source mask.
//!
//! The rendering condition uses neutral expression geometry by default so
//! that expression information reaches the model only through ψ; a config
//! switch can route the target expression into the rendering instead, for
//! comparing the two designs.

use serde::{Deserialize, Serialize};

use crate::face3d::{FaceModel, FaceParams, Image, Mask, ParamGroup, RenderOutput, EXPR_DIM};
use crate::synthgen::TrainingPair;
use crate::{Error, Result};

/// Exact fill value used to mask the foreground of the background condition.
pub const GRAY_FILL: f64 = 0.5;

/// Which attribute an edit changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    Expression,
    Pose,
    Lighting,
    Combined,
}

impl std::str::FromStr for EditMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expression" => Ok(EditMode::Expression),
            "pose" => Ok(EditMode::Pose),
            "lighting" => Ok(EditMode::Lighting),
            "combined" => Ok(EditMode::Combined),
            other => Err(Error::InvalidInput(format!("unknown edit mode `{other}`"))),
        }
    }
}

/// Where the expression condition comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpressionSource {
    /// Use the known coefficients verbatim.
    Oracle,
    /// Recover them from the image with the analysis-by-synthesis fitter.
    Fitted { budget: usize },
}

/// Geometry carried by the rendering condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderingExpression {
    /// Neutral face: expression reaches the model only through ψ.
    Neutral,
    /// Render the target expression geometry as well.
    Target,
}

/// Fill color for the masked foreground region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillColor {
    Gray,
    Black,
}

impl FillColor {
    pub fn value(self) -> f64 {
        match self {
            FillColor::Gray => GRAY_FILL,
            FillColor::Black => 0.0,
        }
    }
}

/// Provider configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub rendering_expression: RenderingExpression,
    pub expression_source: ExpressionSource,
    pub fill: FillColor,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            rendering_expression: RenderingExpression::Neutral,
            expression_source: ExpressionSource::Oracle,
            fill: FillColor::Gray,
        }
    }
}

/// The three disentangled conditions for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet {
    /// Pose+light condition image.
    pub rendering: Image,
    /// Target background with the foreground region filled.
    pub background: Image,
    /// Expression coefficients ψ.
    pub expr: [f64; EXPR_DIM],
}

/// An inference-time editing request.
#[derive(Debug, Clone)]
pub struct EditRequest {
    pub mode: EditMode,
    pub source_params: FaceParams,
    pub source_image: Image,
    pub new_expr: Option<[f64; EXPR_DIM]>,
    pub new_pose: Option<[f64; 3]>,
    pub new_light: Option<[f64; 9]>,
}

impl EditRequest {
    /// Check that the supplied attribute groups match the mode.
    pub fn validate(&self) -> Result<()> {
        let (e, p, l) = (self.new_expr.is_some(), self.new_pose.is_some(), self.new_light.is_some());
        let ok = match self.mode {
            EditMode::Expression => e && !p && !l,
            EditMode::Pose => p && !e && !l,
            EditMode::Lighting => l && !e && !p,
            EditMode::Combined => e || p || l,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "edit mode {:?} does not match supplied attributes (expr={e}, pose={p}, light={l})",
                self.mode
            )))
        }
    }

    /// Source parameters with the edited groups overwritten.
    pub fn edited_params(&self) -> FaceParams {
        let mut p = self.source_params.clone();
        if let Some(e) = self.new_expr {
            p.expr = e;
        }
        if let Some(ps) = self.new_pose {
            p.pose = ps;
        }
        if let Some(l) = self.new_light {
            p.light = l;
        }
        p
    }
}

/// Expression condition ψ for a target.
///
/// Oracle mode returns the coefficients verbatim. Fitted mode recovers them
/// from `target_image` (background blacked out via `target_mask`) with the
/// other groups held at their known values.
pub fn expression_condition(
    model: &FaceModel,
    target_params: &FaceParams,
    target_image: Option<(&Image, &Mask)>,
    source: ExpressionSource,
) -> Result<[f64; EXPR_DIM]> {
    match source {
        ExpressionSource::Oracle => Ok(target_params.expr),
        ExpressionSource::Fitted { budget } => {
            let (image, mask) = target_image.ok_or_else(|| {
                Error::InvalidInput("fitted expression source requires the target image".into())
            })?;
            let mut masked = image.clone();
            for ((y, x), &m) in mask.indexed_iter() {
                if !m {
                    for c in 0..3 {
                        masked[[y, x, c]] = 0.0;
                    }
                }
            }
            let mut init = target_params.clone();
            init.expr = [0.0; EXPR_DIM];
            let fit = model.fit_params(&masked, &init, &[ParamGroup::Expr], budget)?;
            Ok(fit.params.expr)
        }
    }
}

/// Rendering condition: the head at (pose, light) with the identity geometry
/// of `geometry` and either neutral or target expression.
pub fn pose_light_condition(
    model: &FaceModel,
    pose: [f64; 3],
    light: [f64; 9],
    geometry: &FaceParams,
    size: (usize, usize),
    rendering_expression: RenderingExpression,
) -> Result<RenderOutput> {
    let params = FaceParams {
        shape: geometry.shape,
        albedo: geometry.albedo,
        expr: match rendering_expression {
            RenderingExpression::Neutral => [0.0; EXPR_DIM],
            RenderingExpression::Target => geometry.expr,
        },
        pose,
        light,
    };
    model.render(&params, size)
}

/// Pixelwise OR of two masks.
pub fn mask_union(a: &Mask, b: &Mask) -> Result<Mask> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.dim()),
            got: format!("{:?}", b.dim()),
        });
    }
    Ok(Mask::from_shape_fn(a.dim(), |ix| a[ix] || b[ix]))
}

/// Conditioning context: training or one of the edit modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionMode {
    Training,
    Edit(EditMode),
}

fn fill_region(mode: ConditionMode, source_mask: &Mask, target_mask: &Mask) -> Result<Mask> {
    match mode {
        ConditionMode::Training
        | ConditionMode::Edit(EditMode::Pose)
        | ConditionMode::Edit(EditMode::Combined) => mask_union(source_mask, target_mask),
        ConditionMode::Edit(EditMode::Expression) | ConditionMode::Edit(EditMode::Lighting) => {
            Ok(source_mask.clone())
        }
    }
}

/// Background condition: copy `image` and fill the foreground region with the
/// configured color. Training and pose-mode inference fill the union of the
/// source and target masks; expression/lighting inference fills the source
/// mask only.
pub fn background_condition(
    image: &Image,
    source_mask: &Mask,
    target_mask: &Mask,
    mode: ConditionMode,
    fill: FillColor,
) -> Result<Image> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if source_mask.dim() != (h, w) || target_mask.dim() != (h, w) {
        return Err(Error::ShapeMismatch {
            expected: format!("({h}, {w})"),
            got: format!("{:?} / {:?}", source_mask.dim(), target_mask.dim()),
        });
    }
    let region = fill_region(mode, source_mask, target_mask)?;
    let mut out = image.clone();
    let v = fill.value();
    for ((y, x), &m) in region.indexed_iter() {
        if m {
            for c in 0..3 {
                out[[y, x, c]] = v;
            }
        }
    }
    Ok(out)
}

/// Build the training conditions for a pair: everything is extracted from
/// the target side; the background fill uses the mask union.
pub fn build_training_conditions(
    model: &FaceModel,
    pair: &TrainingPair,
    cfg: &ProviderConfig,
) -> Result<ConditionSet> {
    let size = (pair.target_image.shape()[0], pair.target_image.shape()[1]);
    let rendering = pose_light_condition(
        model,
        pair.target_params.pose,
        pair.target_params.light,
        &pair.target_params,
        size,
        cfg.rendering_expression,
    )?;
    let background = background_condition(
        &pair.target_image,
        &pair.source_mask,
        &pair.target_mask,
        ConditionMode::Training,
        cfg.fill,
    )?;
    let expr = expression_condition(
        model,
        &pair.target_params,
        Some((&pair.target_image, &pair.target_mask)),
        cfg.expression_source,
    )?;
    Ok(ConditionSet { rendering: rendering.image, background, expr })
}

/// Build the inference conditions for an edit request.
///
/// Also returns the predicted target mask (the rendered head coverage at the
/// edited pose), which pose-mode editing needs for the background fill.
pub fn build_edit_conditions(
    model: &FaceModel,
    request: &EditRequest,
    size: (usize, usize),
    cfg: &ProviderConfig,
) -> Result<(ConditionSet, Mask)> {
    request.validate()?;
    let edited = request.edited_params();
    let geometry = FaceParams {
        // Identity from the source; expression only matters in target mode.
        shape: request.source_params.shape,
        albedo: request.source_params.albedo,
        expr: edited.expr,
        pose: [0.0; 3],
        light: [0.0; 9],
    };
    let rendering = pose_light_condition(
        model,
        edited.pose,
        edited.light,
        &geometry,
        size,
        cfg.rendering_expression,
    )?;
    let source_mask = model.render(&request.source_params, size)?.mask;
    let background = background_condition(
        &request.source_image,
        &source_mask,
        &rendering.mask,
        ConditionMode::Edit(request.mode),
        cfg.fill,
    )?;
    let expr = match request.mode {
        EditMode::Expression | EditMode::Combined => edited.expr,
        EditMode::Pose | EditMode::Lighting => request.source_params.expr,
    };
    Ok((ConditionSet { rendering: rendering.image, background, expr }, rendering.mask))
}
