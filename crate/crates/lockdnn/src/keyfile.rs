//! Key files.
//!
//! * `keys.json`, held by the model user: T, the Hkey and Mkey segments and
//!   the bias group map.
//! * `accel_private.json`, the device's tamper-proof memory: the detector
//!   and adder layout with `HK*` and the polarity `P`.
//! * `provider_secret.json`, kept by the model provider: masks `V` and `P`.
//!
//! Every key word is a lowercase hex string.

use std::path::Path;

use lockdnn_core::keying::{HkeyConfig, KeyMaterial, MkeyConfig};
use lockdnn_core::sim::{AdderBank, EnergyModel};
use lockdnn_core::{Device, Hkey, Mkey, QFormat, TVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::manifest::QSpec;
use crate::report::write_json;

pub const KEYS_SCHEMA: &str = "lockdnn.keys.v1";
pub const DEVICE_SCHEMA: &str = "lockdnn.device.v1";
pub const SECRET_SCHEMA: &str = "lockdnn.secret.v1";

pub fn hex_word(v: u32) -> String {
    format!("{v:x}")
}

pub fn parse_hex(s: &str) -> Result<u32, Error> {
    let t = s.trim();
    let t = t.strip_prefix("0x").unwrap_or(t);
    if t.is_empty() {
        return Err(Error::KeyFile("empty hex word".into()));
    }
    u32::from_str_radix(t, 16).map_err(|_| Error::KeyFile(format!("bad hex word {s:?}")))
}

fn hex_list(v: &[u32]) -> Vec<String> {
    v.iter().map(|&x| hex_word(x)).collect()
}

fn parse_list(v: &[String], bits: u32, what: &str) -> Result<Vec<u32>, Error> {
    v.iter()
        .map(|s| {
            let x = parse_hex(s)?;
            if bits < 32 && x >> bits != 0 {
                return Err(Error::KeyFile(format!("{what} word {s} wider than {bits} bits")));
            }
            Ok(x)
        })
        .collect()
}

/// Comma-separated hex segments, as given on the command line.
pub fn parse_segments(s: &str) -> Result<Vec<u32>, Error> {
    s.split(',').map(parse_hex).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeysFile {
    pub schema: String,
    pub qformat: QSpec,
    pub t: String,
    pub seg_bits: u32,
    pub hkey: Vec<String>,
    pub msb_bits: u32,
    pub mkey: Vec<String>,
    pub group_map: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceFile {
    pub schema: String,
    pub qformat: QSpec,
    pub t: String,
    pub detectors: usize,
    pub seg_bits: u32,
    pub locked: Vec<usize>,
    pub hk_star: Vec<String>,
    pub groups: u32,
    pub msb_bits: u32,
    pub masked_groups: Vec<u32>,
    pub polarity: Vec<String>,
    pub energy: EnergyModel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecretFile {
    pub schema: String,
    pub msb_bits: u32,
    pub masks: Vec<String>,
    pub polarity: Vec<String>,
}

fn qspec(q: QFormat) -> QSpec {
    QSpec { width: q.width(), frac: q.frac() }
}

fn qformat(s: QSpec) -> Result<QFormat, Error> {
    QFormat::new(s.width, s.frac).map_err(|e| Error::KeyFile(e.to_string()))
}

fn check_schema(found: &str, want: &str) -> Result<(), Error> {
    if found != want {
        return Err(Error::KeyFile(format!("expected schema {want}, found {found:?}")));
    }
    Ok(())
}

impl KeysFile {
    pub fn from_keys(k: &KeyMaterial) -> Self {
        KeysFile {
            schema: KEYS_SCHEMA.into(),
            qformat: qspec(k.t.format()),
            t: hex_word(k.t.bits()),
            seg_bits: k.hkey.seg_bits,
            hkey: hex_list(&k.hkey.correct),
            msb_bits: k.mkey.msb_bits,
            mkey: hex_list(&k.mkey.correct_key().segments),
            group_map: k.mkey.group_map.clone(),
        }
    }

    pub fn hkey(&self) -> Result<Hkey, Error> {
        Ok(Hkey { segments: parse_list(&self.hkey, self.seg_bits, "Hkey")? })
    }

    pub fn mkey(&self) -> Result<Mkey, Error> {
        Ok(Mkey { segments: parse_list(&self.mkey, self.msb_bits, "Mkey")? })
    }

    pub fn check(&self) -> Result<(), Error> {
        check_schema(&self.schema, KEYS_SCHEMA)?;
        qformat(self.qformat)?;
        self.hkey()?;
        self.mkey()?;
        Ok(())
    }
}

impl DeviceFile {
    pub fn from_keys(k: &KeyMaterial) -> Self {
        DeviceFile {
            schema: DEVICE_SCHEMA.into(),
            qformat: qspec(k.t.format()),
            t: hex_word(k.t.bits()),
            detectors: k.hkey.n_detectors,
            seg_bits: k.hkey.seg_bits,
            locked: k.hkey.locked.clone(),
            hk_star: hex_list(&k.hkey.correct),
            groups: k.mkey.n_groups,
            msb_bits: k.mkey.msb_bits,
            masked_groups: k.mkey.masked_groups.clone(),
            polarity: hex_list(&k.mkey.polarity),
            energy: EnergyModel::default(),
        }
    }

    pub fn polarity(&self) -> Result<Vec<u32>, Error> {
        parse_list(&self.polarity, self.msb_bits, "polarity")
    }

    pub fn device(&self) -> Result<Device, Error> {
        check_schema(&self.schema, DEVICE_SCHEMA)?;
        let q = qformat(self.qformat)?;
        let t = parse_list(std::slice::from_ref(&self.t), q.width(), "T")?[0];
        let hkey = HkeyConfig {
            n_detectors: self.detectors,
            seg_bits: self.seg_bits,
            locked: self.locked.clone(),
            correct: parse_list(&self.hk_star, self.seg_bits, "HK*")?,
        };
        hkey.validate()?;
        let polarity = self.polarity()?;
        if polarity.len() != self.groups as usize {
            return Err(Error::KeyFile(format!("{} polarity words for {} groups", polarity.len(), self.groups)));
        }
        if self.masked_groups.windows(2).any(|w| w[0] >= w[1]) || self.masked_groups.iter().any(|&g| g >= self.groups) {
            return Err(Error::KeyFile("masked groups must be ascending group ids".into()));
        }
        if self.msb_bits == 0 || self.msb_bits > q.width() {
            return Err(Error::KeyFile(format!("cannot key {} MSBs of a {}-bit word", self.msb_bits, q.width())));
        }
        Ok(Device {
            t: TVector::new(t, q),
            hkey,
            adders: AdderBank {
                n_groups: self.groups,
                msb_bits: self.msb_bits,
                masked_groups: self.masked_groups.clone(),
                polarity,
            },
            energy: self.energy,
        })
    }
}

impl SecretFile {
    pub fn new(cfg: &MkeyConfig) -> Self {
        SecretFile {
            schema: SECRET_SCHEMA.into(),
            msb_bits: cfg.msb_bits,
            masks: hex_list(&cfg.masks),
            polarity: hex_list(&cfg.polarity),
        }
    }

    pub fn masks(&self) -> Result<Vec<u32>, Error> {
        check_schema(&self.schema, SECRET_SCHEMA)?;
        parse_list(&self.masks, self.msb_bits, "mask")
    }

    pub fn polarity(&self) -> Result<Vec<u32>, Error> {
        check_schema(&self.schema, SECRET_SCHEMA)?;
        parse_list(&self.polarity, self.msb_bits, "polarity")
    }
}

/// Rebuilds the provider's masking config from the user key and the device
/// polarity: `V_i = MK_i XOR P_i`.
pub fn mkey_config(keys: &KeysFile, device: &DeviceFile) -> Result<MkeyConfig, Error> {
    let mk = keys.mkey()?;
    let p = device.polarity()?;
    if keys.msb_bits != device.msb_bits || mk.segments.len() != device.masked_groups.len() {
        return Err(Error::KeyFile("keys.json does not match the device's adder layout".into()));
    }
    if p.len() != device.groups as usize {
        return Err(Error::KeyFile(format!("{} polarity words for {} groups", p.len(), device.groups)));
    }
    let mut masks = vec![0; device.groups as usize];
    for (&g, &m) in device.masked_groups.iter().zip(&mk.segments) {
        if g >= device.groups {
            return Err(Error::KeyFile(format!("masked group {g} out of range")));
        }
        masks[g as usize] = m ^ p[g as usize];
    }
    Ok(MkeyConfig {
        n_groups: device.groups,
        msb_bits: device.msb_bits,
        group_map: keys.group_map.clone(),
        masked_groups: device.masked_groups.clone(),
        masks,
        polarity: p,
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::KeyFile(format!("{}: {e}", path.display())))
}

pub fn load_keys(path: &Path) -> Result<KeysFile, Error> {
    let k: KeysFile = read_json(path)?;
    k.check()?;
    Ok(k)
}

pub fn load_device(path: &Path) -> Result<DeviceFile, Error> {
    let d: DeviceFile = read_json(path)?;
    d.device()?;
    Ok(d)
}

/// Writes `keys.json` and `accel_private.json` into `dir`.
pub fn save_key_pair(k: &KeyMaterial, keys_path: &Path, device_path: &Path) -> Result<(), Error> {
    write_json(keys_path, &KeysFile::from_keys(k))?;
    write_json(device_path, &DeviceFile::from_keys(k))
}
