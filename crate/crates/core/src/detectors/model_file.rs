//! Model files: one JSON header line followed by little-endian f64
//! sections in the order the header lists them.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::iforest::{IForest, ITree};
use super::{Autoencoder, DeepSvdd, DetectorConfig, DetectorModel, Ganomaly, LatentDistance, TrainedDetector};
use crate::embed::Normalizer;
use crate::error::{Error, Result};
use crate::nnkit::{Net, NetSpec};

pub const MODEL_FORMAT: &str = "driftmask-model/1";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    kind: String,
    config: DetectorConfig,
    normalizer: Option<Normalizer>,
    meta: Value,
    sections: Vec<Section>,
}

#[derive(Serialize, Deserialize)]
struct Section {
    name: String,
    len: usize,
}

#[derive(Default)]
struct Sections {
    order: Vec<(String, Vec<f64>)>,
    by_name: BTreeMap<String, Vec<f64>>,
}

impl Sections {
    fn put(&mut self, name: impl Into<String>, v: &[f64]) {
        self.order.push((name.into(), v.to_vec()));
    }

    fn take(&mut self, name: &str) -> Result<Vec<f64>> {
        self.by_name
            .remove(name)
            .ok_or_else(|| Error::data(format!("model file lacks section {name}")))
    }

    fn put_net(&mut self, prefix: &str, net: &Net) -> Value {
        for (i, l) in net.layers.iter().enumerate() {
            self.put(format!("{prefix}.{i}.w"), &l.w);
            self.put(format!("{prefix}.{i}.b"), &l.b);
        }
        json!(net.spec)
    }

    fn take_net(&mut self, prefix: &str, spec: &Value) -> Result<Net> {
        let spec: NetSpec = serde_json::from_value(spec.clone())?;
        let mut net = Net::new(spec)?;
        for (i, l) in net.layers.iter_mut().enumerate() {
            let w = self.take(&format!("{prefix}.{i}.w"))?;
            let b = self.take(&format!("{prefix}.{i}.b"))?;
            if w.len() != l.w.len() || b.len() != l.b.len() {
                return Err(Error::data(format!("section sizes for {prefix}.{i} do not match its spec")));
            }
            l.w = w;
            l.b = b;
        }
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct TreeShape {
    feature: Vec<usize>,
    left: Vec<usize>,
    right: Vec<usize>,
    size: Vec<usize>,
}

fn field<'a>(meta: &'a Value, key: &str) -> Result<&'a Value> {
    meta.get(key).ok_or_else(|| Error::data(format!("model header lacks meta.{key}")))
}

fn typed<T: serde::de::DeserializeOwned>(meta: &Value, key: &str) -> Result<T> {
    Ok(serde_json::from_value(field(meta, key)?.clone())?)
}

fn encode(model: &DetectorModel, s: &mut Sections) -> Value {
    match model {
        DetectorModel::Iforest(m) => {
            let shapes: Vec<TreeShape> = m
                .trees
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    s.put(format!("tree{i}.threshold"), &t.threshold);
                    TreeShape {
                        feature: t.feature.clone(),
                        left: t.left.clone(),
                        right: t.right.clone(),
                        size: t.size.clone(),
                    }
                })
                .collect();
            json!({"params": m.params, "psi": m.psi, "n_features": m.n_features, "trees": shapes})
        }
        DetectorModel::DeepSvdd(m) => {
            let net = s.put_net("net", &m.net);
            s.put("center", &m.center);
            json!({"net": net, "steps": m.steps})
        }
        DetectorModel::Autoencoder(m) => {
            let net = s.put_net("net", &m.net);
            json!({"net": net, "latent": m.latent, "steps": m.steps})
        }
        DetectorModel::Ganomaly(m) => {
            let nets: BTreeMap<&str, Value> = [
                ("enc1", &m.enc1),
                ("dec", &m.dec),
                ("enc2", &m.enc2),
                ("disc_feat", &m.disc_feat),
                ("disc_head", &m.disc_head),
            ]
            .into_iter()
            .map(|(k, n)| (k, s.put_net(k, n)))
            .collect();
            s.put("val_trace", &m.val_trace);
            json!({"nets": nets, "distance": m.distance, "steps": m.steps, "stopped_early": m.stopped_early})
        }
    }
}

fn decode(config: &DetectorConfig, meta: &Value, s: &mut Sections) -> Result<DetectorModel> {
    Ok(match config {
        DetectorConfig::Iforest(_) => {
            let shapes: Vec<TreeShape> = typed(meta, "trees")?;
            let trees = shapes
                .into_iter()
                .enumerate()
                .map(|(i, t)| {
                    let threshold = s.take(&format!("tree{i}.threshold"))?;
                    if threshold.len() != t.feature.len() {
                        return Err(Error::data(format!("tree {i} threshold count mismatch")));
                    }
                    Ok(ITree {
                        feature: t.feature,
                        threshold,
                        left: t.left,
                        right: t.right,
                        size: t.size,
                    })
                })
                .collect::<Result<_>>()?;
            DetectorModel::Iforest(IForest {
                params: typed(meta, "params")?,
                psi: typed(meta, "psi")?,
                n_features: typed(meta, "n_features")?,
                trees,
            })
        }
        DetectorConfig::DeepSvdd(_) => DetectorModel::DeepSvdd(DeepSvdd {
            net: s.take_net("net", field(meta, "net")?)?,
            center: s.take("center")?,
            steps: typed(meta, "steps")?,
        }),
        DetectorConfig::Autoencoder(_) => DetectorModel::Autoencoder(Autoencoder {
            net: s.take_net("net", field(meta, "net")?)?,
            latent: typed(meta, "latent")?,
            steps: typed(meta, "steps")?,
        }),
        DetectorConfig::Ganomaly(_) => {
            let nets = field(meta, "nets")?;
            let mut net = |k: &str| s.take_net(k, field(nets, k)?);
            let (enc1, dec, enc2, disc_feat, disc_head) =
                (net("enc1")?, net("dec")?, net("enc2")?, net("disc_feat")?, net("disc_head")?);
            DetectorModel::Ganomaly(Ganomaly {
                enc1,
                dec,
                enc2,
                disc_feat,
                disc_head,
                distance: typed::<LatentDistance>(meta, "distance")?,
                steps: typed(meta, "steps")?,
                stopped_early: typed(meta, "stopped_early")?,
                val_trace: s.take("val_trace")?,
            })
        }
    })
}

pub fn save_model(model: &TrainedDetector, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = Sections::default();
    let meta = encode(&model.model, &mut s);
    let header = Header {
        format: MODEL_FORMAT.into(),
        kind: model.kind().name().into(),
        config: model.config.clone(),
        normalizer: model.normalizer.clone(),
        meta,
        sections: s.order.iter().map(|(n, v)| Section { name: n.clone(), len: v.len() }).collect(),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    for (_, v) in &s.order {
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TrainedDetector> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&line).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.format != MODEL_FORMAT {
        return Err(Error::data(format!("unsupported model format {:?}", header.format)));
    }
    if header.kind != header.config.kind().name() {
        return Err(Error::data("model header kind disagrees with its config"));
    }
    let mut s = Sections::default();
    let mut bytes = [0u8; 8];
    for sec in &header.sections {
        let mut v = Vec::with_capacity(sec.len);
        for _ in 0..sec.len {
            r.read_exact(&mut bytes)
                .map_err(|_| Error::data(format!("model payload truncated in section {}", sec.name)))?;
            v.push(f64::from_le_bytes(bytes));
        }
        s.by_name.insert(sec.name.clone(), v);
    }
    if r.read(&mut bytes).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::data("model payload has trailing bytes"));
    }
    let model = decode(&header.config, &header.meta, &mut s)?;
    Ok(TrainedDetector {
        config: header.config,
        normalizer: header.normalizer,
        model,
    })
}
