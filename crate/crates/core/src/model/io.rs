use std::fs;
use std::path::Path;

use super::MoeModel;
use crate::error::{FareError, Result};
use crate::scalar::Scalar;

/// First line of every model file.
pub const MODEL_MAGIC: &str = "FARELAB-MODEL-v1";

/// `MODEL_MAGIC`, a newline, then the config and flat weight arrays as JSON.
pub fn model_to_string<T: Scalar>(model: &MoeModel<T>) -> Result<String> {
    let mut text = String::from(MODEL_MAGIC);
    text.push('\n');
    text.push_str(&serde_json::to_string(model)?);
    text.push('\n');
    Ok(text)
}

pub fn model_from_str<T: Scalar>(text: &str, source: &str) -> Result<MoeModel<T>> {
    let (magic, body) = text
        .split_once('\n')
        .ok_or_else(|| FareError::parse(source, "line 1", "missing header line"))?;
    if magic != MODEL_MAGIC {
        return Err(FareError::parse(
            source,
            "line 1",
            format!("expected `{MODEL_MAGIC}`, found `{magic}`"),
        ));
    }
    let model: MoeModel<T> = serde_json::from_str(body).map_err(|e| {
        FareError::parse(source, format!("line {}", e.line() + 1), e.to_string())
    })?;
    model.config.validate()?;
    if !model.is_finite() {
        return Err(FareError::parse(source, "body", "non-finite weight"));
    }
    Ok(model)
}

pub fn save_model<T: Scalar>(model: &MoeModel<T>, path: &Path) -> Result<()> {
    fs::write(path, model_to_string(model)?).map_err(|e| FareError::io(path, e))
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<MoeModel<T>> {
    let text = fs::read_to_string(path).map_err(|e| FareError::io(path, e))?;
    model_from_str(&text, &path.display().to_string())
}
