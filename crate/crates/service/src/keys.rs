//! Demo key files: `<name>.key` holds a hex secret, `<name>.pub` the public key.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use bpmnchain::crypto::{self, SecretKey};

pub fn key_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.key"))
}

pub fn read_key(path: &Path) -> Result<SecretKey> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    crypto::secret_from_hex(text.trim()).ok_or_else(|| anyhow!("{} is not a hex ed25519 secret", path.display()))
}

pub fn write_key(dir: &Path, name: &str, key: &SecretKey) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(key_path(dir, name), crypto::secret_hex(key) + "\n")?;
    std::fs::write(dir.join(format!("{name}.pub")), crypto::public_hex(key) + "\n")?;
    Ok(())
}

/// Random key, or a derived one when `seed` is given so demos are repeatable.
pub fn make_key(seed: Option<&str>, name: &str) -> SecretKey {
    match seed {
        Some(s) => crypto::key_from_seed(&format!("{s}:{name}")),
        None => crypto::generate_key(),
    }
}

/// Load `path`, creating a fresh key there first if it does not exist.
pub fn load_or_create(path: &Path) -> Result<SecretKey> {
    if !path.exists() {
        let key = crypto::generate_key();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, crypto::secret_hex(&key) + "\n")?;
    }
    read_key(path)
}
