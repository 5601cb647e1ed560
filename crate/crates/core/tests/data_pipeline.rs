use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vitsteer_core::data::{gen_synthetic, load_cifar100, patchify, Split, CIFAR_RECORD_LEN};
use vitsteer_core::tensor::Tensor;

#[test]
fn linear_probe_separates_synthetic_classes() {
    let data = gen_synthetic(8, 60, 16, 7).unwrap();
    let feats = 16 * 16 * 3;
    let classes = 8;
    let mut w = vec![0.0f64; feats * classes];
    let mut b = vec![0.0f64; classes];
    let lr = 0.05;
    for _ in 0..150 {
        let mut gw = vec![0.0; feats * classes];
        let mut gb = vec![0.0; classes];
        for img in &data.images {
            let x: Vec<f64> = img.pixels.iter().map(|&p| p as f64 - 0.5).collect();
            let mut logits: Vec<f64> = (0..classes)
                .map(|c| b[c] + (0..feats).map(|i| x[i] * w[i * classes + c]).sum::<f64>())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter_mut().map(|l| { *l = (*l - mx).exp(); *l }).sum();
            for c in 0..classes {
                let g = logits[c] / z - if c == img.label { 1.0 } else { 0.0 };
                gb[c] += g;
                for i in 0..feats {
                    gw[i * classes + c] += g * x[i];
                }
            }
        }
        let n = data.len() as f64;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * g / n;
        }
        for (bi, g) in b.iter_mut().zip(&gb) {
            *bi -= lr * g / n;
        }
    }
    let correct = data
        .images
        .iter()
        .filter(|img| {
            let scores: Vec<f64> = (0..classes)
                .map(|c| b[c] + (0..feats).map(|i| (img.pixels[i] as f64 - 0.5) * w[i * classes + c]).sum::<f64>())
                .collect();
            let best = (0..classes).max_by(|&a, &c| scores[a].partial_cmp(&scores[c]).unwrap()).unwrap();
            best == img.label
        })
        .count();
    let acc = correct as f64 / data.len() as f64;
    assert!(acc > 0.9, "probe train accuracy {acc}");
}

#[test]
fn synthetic_is_seed_stable() {
    let a = gen_synthetic(8, 5, 16, 7).unwrap();
    let b = gen_synthetic(8, 5, 16, 7).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.fingerprint(), gen_synthetic(8, 5, 16, 8).unwrap().fingerprint());
    let empty = gen_synthetic(8, 0, 16, 7).unwrap();
    assert!(empty.is_empty());
    assert_eq!(empty.classes.len(), 8);
}

#[test]
fn cifar_reload_is_hash_stable() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for r in 0..6u8 {
        let mut rec = vec![0u8; CIFAR_RECORD_LEN];
        rec[0] = r % 2;
        rec[1] = r % 3;
        for (i, v) in rec[2..].iter_mut().enumerate() {
            *v = (i as u8).wrapping_mul(r + 1);
        }
        bytes.extend(rec);
    }
    std::fs::write(dir.path().join("train.bin"), &bytes).unwrap();
    let a = load_cifar100(dir.path(), Split::Train, None).unwrap();
    let b = load_cifar100(dir.path(), Split::Train, None).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_eq!(a.len(), 6);
    let capped = load_cifar100(dir.path(), Split::Train, Some(1)).unwrap();
    assert_eq!(capped.labels(), vec![0, 1, 2]);
}

#[test]
fn patchify_is_injective_on_spot_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (ps, d) = (4, 48);
    let embed = Tensor::<f64>::randn(&[d, 3 * ps * ps], 1.0, &mut rng).unwrap();
    let cls = Tensor::<f64>::randn(&[d], 1.0, &mut rng).unwrap();
    let pos = Tensor::<f64>::randn(&[17, d], 1.0, &mut rng).unwrap();
    let data = gen_synthetic(8, 10, 16, 3).unwrap();
    let mut seen = HashSet::new();
    for img in &data.images {
        let seq = patchify(img, ps, &embed, &cls, &pos).unwrap();
        let key: Vec<u64> = seq.tokens.data().iter().map(|v| v.to_bits()).collect();
        assert!(seen.insert(key));
    }
    assert_eq!(seen.len(), data.len());
}
