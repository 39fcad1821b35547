use wasm_bindgen::prelude::*;

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen(js_name = energyTrace)]
pub fn energy_trace(integrator: &str, dt: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    crate::energy_series(integrator, dt, steps).map_err(js)
}

#[wasm_bindgen(js_name = determinantSweep)]
pub fn determinant_sweep(integrator: &str, d_k: usize, coupling_std: f64, seed: u32, dts: Vec<f64>) -> Result<Vec<f64>, JsError> {
    crate::determinant_sweep(integrator, d_k, coupling_std, u64::from(seed), &dts).map_err(js)
}

/// Row-major `size × size` weights; `size` is the square root of the length.
#[wasm_bindgen(js_name = attentionHeatmap)]
pub fn attention_heatmap(variant: &str, n_steps: usize, layer: usize, head: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    crate::attention_heatmap(variant, n_steps, layer, head, u64::from(seed)).map(|h| h.weights).map_err(js)
}
