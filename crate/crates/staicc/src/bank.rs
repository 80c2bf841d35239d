//! Template banks as editable TOML files.

use std::path::Path;

use staicc_core::templating::{default_bank_for, TemplateBank, TemplateError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("bank io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bank toml: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

pub fn to_toml(bank: &TemplateBank) -> String {
    toml::to_string(bank).expect("bank serializes")
}

pub fn from_toml(text: &str) -> Result<TemplateBank, BankError> {
    let bank: TemplateBank = toml::from_str(text)?;
    bank.validate()?;
    Ok(bank)
}

pub fn load(path: &Path) -> Result<TemplateBank, BankError> {
    from_toml(&std::fs::read_to_string(path)?)
}

/// A bank file when given, else the built-in bank for the dataset id.
pub fn resolve(dataset_id: &str, path: Option<&Path>) -> Result<TemplateBank, BankError> {
    match path {
        Some(p) => load(p),
        None => Ok(default_bank_for(dataset_id)?),
    }
}
