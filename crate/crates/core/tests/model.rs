use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stdmmf::encoders::{build_backbone, Aspp, BackboneConfig};
use stdmmf::fusion::gate_weights;
use stdmmf::ila::apply_attention;
use stdmmf::ilw::{softmax_pair, InterlayerWeight};
use stdmmf::pipeline::{ModelConfig, Stdmmf, TrainConfig};
use stdmmf_tensor::{Builder, EntryKind, Graph, Mode, ParamStore, BN_EPS};

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

#[test]
fn resnet34_backbone_and_aspp_parameter_counts() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut b = Builder::new(&mut store, &mut rng);
    build_backbone(&mut b, "s", &BackboneConfig::resnet34()).unwrap();
    let aspp = store.parameter_count_under("s.aspp");
    // torchvision resnet34 without its classifier
    assert_eq!(store.parameter_count_under("s.") - aspp, 21_284_672);
    assert_eq!(aspp, 1_233_664);
}

#[test]
fn full_model_builds_every_module_under_its_prefix() {
    let m = Stdmmf::new(ModelConfig::tiny(), 0).unwrap();
    for p in ["spatial.", "temporal.", "ila.", "ilw.spatial", "ilw.temporal", "bma.spatial", "bma.temporal", "decoder.", "side.spatial", "side.temporal"] {
        assert!(m.store.parameter_count_under(p) > 0, "{p}");
    }
    assert_eq!(m.store.parameter_count_under("spatial."), m.store.parameter_count_under("temporal."));
}

fn run_tiny(model: &mut Stdmmf, seed: u64, mode: Mode) -> (Vec<f64>, [usize; 4]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let Stdmmf { store, net } = model;
    let mut g = Graph::new(store, mode);
    let f = g.input([1, 3, 32, 32], random(&mut rng, 3 * 32 * 32)).unwrap();
    let o = g.input([1, 3, 32, 32], random(&mut rng, 3 * 32 * 32)).unwrap();
    let fwd = net.forward(&mut g, f, o).unwrap();
    (g.to_vec(fwd.out), g.shape(fwd.out))
}

#[test]
fn tiny_forward_is_well_formed_and_deterministic() {
    let mut a = Stdmmf::new(ModelConfig::tiny(), 3).unwrap();
    let mut b = Stdmmf::new(ModelConfig::tiny(), 3).unwrap();
    let (oa, shape) = run_tiny(&mut a, 1, Mode::EVAL);
    let (ob, _) = run_tiny(&mut b, 1, Mode::EVAL);
    assert_eq!(shape, [1, 1, 32, 32]);
    assert!(oa.iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(oa, ob);
}

#[test]
fn zero_parameters_give_one_half_everywhere() {
    let mut m = Stdmmf::new(ModelConfig::tiny(), 4).unwrap();
    for e in m.store.entries_mut() {
        if e.kind == EntryKind::Parameter {
            e.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let (out, _) = run_tiny(&mut m, 2, Mode::EVAL);
    assert!(out.iter().all(|&v| v == 0.5));
}

#[test]
fn mix_levels_examples() {
    let m = Stdmmf::new(ModelConfig::tiny(), 5).unwrap();
    let mut store = m.store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ch = BackboneConfig::tiny().level_channels();
    let sizes = [8, 4, 2, 1, 1];
    let mut g = Graph::new(&mut store, Mode::EVAL);
    let mut ls = Vec::new();
    let mut lt = Vec::new();
    for i in 0..5 {
        let s = [1, ch[i], sizes[i], sizes[i]];
        ls.push(g.input(s, random(&mut rng, ch[i] * sizes[i] * sizes[i])).unwrap());
        lt.push(g.input(s, random(&mut rng, ch[i] * sizes[i] * sizes[i])).unwrap());
    }
    let ls: [_; 5] = ls.try_into().unwrap();
    let lt: [_; 5] = lt.try_into().unwrap();
    let one = g.constant([1, 5, 1, 1], 1.0);
    let zero = g.constant([1, 5, 1, 1], 0.0);
    let half = g.constant([1, 5, 1, 1], 0.5);
    let only_s = m.net.decoder.mix_levels(&mut g, &ls, &lt, one, zero).unwrap();
    let other = m.net.decoder.mix_levels(&mut g, &ls, &ls, one, zero).unwrap();
    let halves = m.net.decoder.mix_levels(&mut g, &ls, &ls, half, half).unwrap();
    for i in 0..5 {
        assert_eq!(g.value(only_s[i]), g.value(other[i]));
        assert_eq!(g.value(only_s[i]), g.value(halves[i]));
        assert_eq!(g.shape(only_s[i]), [1, 64, sizes[i], sizes[i]]);
    }
    let mut bad = lt;
    bad[2] = ls[1];
    assert!(m.net.decoder.mix_levels(&mut g, &ls, &bad, one, zero).is_err());
}

#[test]
fn decode_with_zero_attention_is_well_formed() {
    let m = Stdmmf::new(ModelConfig::tiny(), 6).unwrap();
    let mut store = m.store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let sizes = [8, 4, 2, 1, 1];
    let mut g = Graph::new(&mut store, Mode::EVAL);
    let mix: Vec<_> = sizes.iter().map(|&s| g.input([1, 64, s, s], random(&mut rng, 64 * s * s)).unwrap()).collect();
    let mix: [_; 5] = mix.try_into().unwrap();
    let zero = g.zeros([1, 1, 8, 8]);
    let d = m.net.decoder.decode(&mut g, &mix, Some(zero), (32, 32)).unwrap();
    assert!(g.value(d.fa.unwrap()).iter().all(|&v| v == 0.0));
    assert!(g.value(d.out).iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(m.net.decoder.decode(&mut g, &mix, None, (4, 4)).is_err());
}

/// On a 1×1 map every dilated 3×3 kernel only sees its centre tap, so ASPP reduces to
/// matrix products that can be written out directly.
#[test]
fn aspp_single_pixel_oracle() {
    let (cin, cout) = (6, 4);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let aspp = {
        let mut b = Builder::new(&mut store, &mut rng);
        Aspp::new(&mut b, "a", cin, cout).unwrap()
    };
    let x: Vec<f64> = (0..cin).map(|i| (i as f64 - 2.0) * 0.7).collect();
    let bn = |v: f64| (v / (1.0 + BN_EPS).sqrt()).max(0.0);
    let w = |name: &str| store.data(store.id(name).unwrap()).to_vec();
    let mut cat = Vec::new();
    for i in 0..4 {
        let wt = w(&format!("a.branch{i}.conv.weight"));
        for o in 0..cout {
            let s: f64 = (0..cin).map(|c| wt[(o * cin + c) * 9 + 4] * x[c]).sum();
            cat.push(bn(s));
        }
    }
    let wp = w("a.pool.conv.weight");
    for o in 0..cout {
        cat.push(bn((0..cin).map(|c| wp[o * cin + c] * x[c]).sum()));
    }
    let wj = w("a.project.conv.weight");
    let expect: Vec<f64> = (0..cout).map(|o| bn((0..5 * cout).map(|c| wj[o * 5 * cout + c] * cat[c]).sum())).collect();

    let mut g = Graph::new(&mut store, Mode::EVAL);
    let xv = g.input([1, cin, 1, 1], x.clone()).unwrap();
    let y = aspp.forward(&mut g, xv).unwrap();
    for (a, b) in g.value(y).iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn aspp_keeps_spatial_size() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let aspp = {
        let mut b = Builder::new(&mut store, &mut rng);
        Aspp::new(&mut b, "a", 8, 5).unwrap()
    };
    let mut g = Graph::new(&mut store, Mode::EVAL);
    let x = g.input([2, 8, 5, 7], random(&mut rng, 2 * 8 * 35)).unwrap();
    let y = aspp.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), [2, 5, 5, 7]);
}

#[test]
fn tiny_config_from_text_builds() {
    let cfg = TrainConfig::parse("backbone = tiny\ninput_size = 64\n").unwrap();
    let mut m = Stdmmf::new(ModelConfig::from_train(&cfg), 0).unwrap();
    let Stdmmf { store, net } = &mut m;
    let mut g = Graph::new(store, Mode::EVAL);
    let f = g.zeros([1, 3, 64, 64]);
    let out = net.forward(&mut g, f, f).unwrap().out;
    assert_eq!(g.shape(out), [1, 1, 64, 64]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn gate_is_sound(rows in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 5), thr in 0.0f64..=1.0) {
        let iw = InterlayerWeight { rows: std::array::from_fn(|i| [rows[i].0, rows[i].1]) };
        let gw = gate_weights(&iw, thr).unwrap();
        for (a, b) in iw.rows.iter().zip(gw.rows.iter()) {
            prop_assert!(b[0] <= a[0] && b[1] <= a[1]);
            prop_assert!(b[0] >= 0.0 && b[1] >= 0.0);
            prop_assert!(b[0] == a[0] || b[0] == 0.0);
            prop_assert!(b[1] == a[1] || b[1] == 0.0);
            if (a[0] - a[1]).abs() < thr {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn softmax_pair_is_a_distribution(a in -50.0f64..50.0, b in -50.0f64..50.0) {
        let [s, t] = softmax_pair(a, b);
        prop_assert!((s + t - 1.0).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&t));
        prop_assert_eq!(softmax_pair(b, a), [t, s]);
    }

    #[test]
    fn zero_attention_is_identity(vals in prop::collection::vec(-10.0f64..10.0, 2 * 3 * 4)) {
        let mut store = ParamStore::new();
        let mut g = Graph::new(&mut store, Mode::EVAL);
        let x = g.input([2, 3, 2, 2], vals.clone()).unwrap();
        let a = g.zeros([2, 1, 2, 2]);
        let y = apply_attention(&mut g, x, a).unwrap();
        prop_assert_eq!(g.to_vec(y), vals);
    }
}
