use ndarray::{Array2, Ix2};

use super::params::{VcmParams, STYLE_CONV_1, STYLE_CONV_2, STYLE_GRID, STYLE_OUT, STYLE_POS};
use crate::backbone::ImageRGBA;
use crate::tensor::{Binder, Graph, Var};
use crate::{Error, Result};

/// Style tokens `[8, d_text]` for a single foreground image.
pub fn encode_style(params: &VcmParams, foreground: &ImageRGBA) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let mut binder = Binder::frozen();
    let v = style_tokens_graph(&mut g, &mut binder, params, foreground)?;
    Ok(g.value(v).clone().into_dimensionality::<Ix2>().expect("token matrix"))
}

/// Tape version of [`encode_style`]: two stride-2 convolutions over
/// alpha-premultiplied RGB, average pooling to a 2×4 grid, a linear map to
/// the text width and a learned position table.
pub(crate) fn style_tokens_graph(
    g: &mut Graph,
    binder: &mut Binder,
    params: &VcmParams,
    foreground: &ImageRGBA,
) -> Result<Var> {
    if foreground.batch() != 1 {
        return Err(Error::dim(format!(
            "style encoder takes one image, got a batch of {}",
            foreground.batch()
        )));
    }
    let (h, w) = (foreground.height(), foreground.width());
    let (gh, gw) = STYLE_GRID;
    if h % (4 * gh) != 0 || w % (4 * gw) != 0 {
        return Err(Error::dim(format!("style encoder cannot pool {h}x{w} onto a {gh}x{gw} grid")));
    }
    let store = params.store();
    let mut bind = |g: &mut Graph, name: String| binder.bind(g, &name, store.get_arc(&name).expect("style parameter"));
    let x = g.constant(foreground.premultiplied_rgb());
    let mut hcur = x;
    for layer in [STYLE_CONV_1, STYLE_CONV_2] {
        let wv = bind(g, format!("{layer}.weight"));
        let bv = bind(g, format!("{layer}.bias"));
        let y = g.conv2d(hcur, wv, 2, 1);
        let y = g.add_bias(y, bv);
        hcur = g.silu(y);
    }
    let pooled = g.avg_pool(hcur, h / 4 / gh, w / 4 / gw);
    let tokens = g.to_tokens(pooled);
    let wo = bind(g, format!("{STYLE_OUT}.weight"));
    let bo = bind(g, format!("{STYLE_OUT}.bias"));
    let pos = bind(g, STYLE_POS.to_string());
    let t = g.linear(tokens, wo);
    let t = g.add_bias(t, bo);
    Ok(g.add(t, pos))
}
