//! Regenerates the golden spec files under specs/.
//!
//! Usage: gen_specs [OUT_DIR]  (default: ./specs)
//!
//! Prints a cost summary per generated spec so changes against the reference
//! model-zoo numbers are visible at a glance.

use std::path::PathBuf;

use autoslim::netspec::{
    apply_width_multiplier, max_config, LayerKind, LayerSpec, Network, NetworkSpec, WidthBounds,
};
use autoslim::resource::cost;

struct Builder {
    layers: Vec<LayerSpec>,
    edges: Vec<(String, String)>,
    ties: Vec<Vec<String>>,
    last: Option<String>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            layers: Vec::new(),
            edges: Vec::new(),
            ties: Vec::new(),
            last: None,
        }
    }

    fn push(
        &mut self,
        id: &str,
        kind: LayerKind,
        kernel: usize,
        stride: usize,
        base: usize,
        slimmable: bool,
        set: &str,
        inputs: &[&str],
    ) -> String {
        self.layers.push(LayerSpec {
            id: id.to_string(),
            kind,
            kernel,
            stride,
            base_channels: base,
            slimmable,
            channel_set: set.to_string(),
        });
        for i in inputs {
            self.edges.push((i.to_string(), id.to_string()));
        }
        self.last = Some(id.to_string());
        id.to_string()
    }

    fn chain(
        &mut self,
        id: &str,
        kind: LayerKind,
        kernel: usize,
        stride: usize,
        base: usize,
        slimmable: bool,
        set: &str,
    ) -> String {
        let prev = self.last.clone();
        let inputs: Vec<&str> = prev.as_deref().into_iter().collect();
        self.push(id, kind, kernel, stride, base, slimmable, set, &inputs)
    }

    /// conv + bn (+ optional relu) with shared channel-set.
    #[allow(clippy::too_many_arguments)]
    fn conv_bn(
        &mut self,
        id: &str,
        kernel: usize,
        stride: usize,
        base: usize,
        slimmable: bool,
        set: &str,
        relu: bool,
        depthwise: bool,
    ) -> String {
        let kind = if depthwise {
            LayerKind::Dwconv
        } else {
            LayerKind::Conv
        };
        self.chain(id, kind, kernel, stride, base, slimmable, set);
        self.chain(&format!("{id}_bn"), LayerKind::Bn, 1, 1, base, slimmable, set);
        if relu {
            self.chain(&format!("{id}_relu"), LayerKind::Relu, 1, 1, base, slimmable, set);
        }
        self.last.clone().unwrap()
    }

    fn finish(
        self,
        input_shape: (usize, usize, usize),
        num_classes: usize,
        bounds: WidthBounds,
    ) -> NetworkSpec {
        NetworkSpec {
            input_shape,
            num_classes,
            bounds,
            layers: self.layers,
            edges: self.edges,
            residual_ties: self.ties,
        }
    }
}

fn toy_cnn() -> NetworkSpec {
    let mut b = Builder::new();
    b.conv_bn("c1", 3, 2, 16, true, "a", true, false);
    b.conv_bn("c2", 3, 2, 32, true, "b", true, false);
    b.chain("gap", LayerKind::AvgpoolGlobal, 1, 1, 32, true, "b");
    b.chain("fc", LayerKind::Fc, 1, 1, 10, false, "out");
    b.finish(
        (1, 28, 28),
        10,
        WidthBounds {
            lower: 0.15,
            upper: 1.5,
            groups: 8,
        },
    )
}

/// MobileNet v2 family. `group_strides` carries the stride of the first
/// block in each of the 7 stages; `conv1_stride` handles the CIFAR stem.
fn mobilenet_v2(
    input: (usize, usize, usize),
    classes: usize,
    conv1_stride: usize,
    group_strides: [usize; 7],
    slim_last: bool,
) -> NetworkSpec {
    // (expansion, out_channels, repeats) per stage; strides come in.
    let cfg: [(usize, usize, usize); 7] = [
        (1, 16, 1),
        (6, 24, 2),
        (6, 32, 3),
        (6, 64, 4),
        (6, 96, 3),
        (6, 160, 3),
        (6, 320, 1),
    ];
    let mut b = Builder::new();
    b.conv_bn("conv1", 3, conv1_stride, 32, true, "c1", true, false);
    let mut in_base = 32;
    let mut in_set = "c1".to_string();
    let mut block = 0usize;
    for (stage, &(t, c, n)) in cfg.iter().enumerate() {
        let out_set = format!("p{c}_s{stage}");
        let mut tie: Vec<String> = Vec::new();
        for rep in 0..n {
            block += 1;
            let s = if rep == 0 { group_strides[stage] } else { 1 };
            let id = format!("b{block}");
            let residual = s == 1 && in_base == c && rep > 0;
            let dw_in_set;
            if t != 1 {
                let e_set = format!("e{block}");
                b.conv_bn(&format!("{id}_exp"), 1, 1, t * in_base, true, &e_set, true, false);
                dw_in_set = e_set;
            } else {
                dw_in_set = in_set.clone();
            }
            let dw_base = if t != 1 { t * in_base } else { in_base };
            b.conv_bn(&format!("{id}_dw"), 3, s, dw_base, true, &dw_in_set, true, true);
            let proj = b.conv_bn(&format!("{id}_proj"), 1, 1, c, true, &out_set, false, false);
            if residual {
                let prev_out = tie.last().cloned().unwrap();
                let add = format!("{id}_add");
                b.push(&add, LayerKind::Add, 1, 1, c, true, &out_set, &[&prev_out, &proj]);
                tie.push(add);
            } else {
                tie.push(proj);
            }
            in_base = c;
            in_set = out_set.clone();
        }
        if tie.len() > 1 {
            b.ties.push(tie);
        }
    }
    b.conv_bn("conv_last", 1, 1, 1280, slim_last, "cl", true, false);
    b.chain("gap", LayerKind::AvgpoolGlobal, 1, 1, 1280, slim_last, "cl");
    b.chain("fc", LayerKind::Fc, 1, 1, classes, false, "out");
    b.finish(
        input,
        classes,
        WidthBounds {
            lower: 0.15,
            upper: 1.5,
            groups: 12,
        },
    )
}

fn mobilenet_v1() -> NetworkSpec {
    // (out_channels, dw_stride) per separable pair.
    let cfg: [(usize, usize); 13] = [
        (64, 1),
        (128, 2),
        (128, 1),
        (256, 2),
        (256, 1),
        (512, 2),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (1024, 2),
        (1024, 1),
    ];
    let mut b = Builder::new();
    b.conv_bn("conv1", 3, 2, 32, true, "c1", true, false);
    let mut in_base = 32;
    let mut in_set = "c1".to_string();
    for (i, &(c, s)) in cfg.iter().enumerate() {
        let id = i + 1;
        b.conv_bn(&format!("dw{id}"), 3, s, in_base, true, &in_set, true, true);
        let set = format!("p{id}");
        b.conv_bn(&format!("pw{id}"), 1, 1, c, true, &set, true, false);
        in_base = c;
        in_set = set;
    }
    b.chain("gap", LayerKind::AvgpoolGlobal, 1, 1, 1024, true, &in_set.clone());
    b.chain("fc", LayerKind::Fc, 1, 1, 1000, false, "out");
    b.finish(
        (3, 224, 224),
        1000,
        WidthBounds {
            lower: 0.15,
            upper: 1.5,
            groups: 12,
        },
    )
}

fn resnet50() -> NetworkSpec {
    // (mid, out, repeats, stride) per stage.
    let cfg: [(usize, usize, usize, usize); 4] = [
        (64, 256, 3, 1),
        (128, 512, 4, 2),
        (256, 1024, 6, 2),
        (512, 2048, 3, 2),
    ];
    let mut b = Builder::new();
    b.conv_bn("conv1", 7, 2, 64, true, "c1", true, false);
    // Stem downsampling stands in for the usual 3x3 max pool, which is not
    // in the layer set; a stride-2 depthwise conv is the cheapest spatial
    // surrogate (~2M extra MAdds on 4.1G).
    b.conv_bn("pool_dw", 3, 2, 64, true, "c1", true, true);
    let mut in_set = "c1".to_string();
    let mut block = 0usize;
    for (stage, &(mid, out, n, stride)) in cfg.iter().enumerate() {
        let out_set = format!("p{stage}");
        let mut tie: Vec<String> = Vec::new();
        for rep in 0..n {
            block += 1;
            let s = if rep == 0 { stride } else { 1 };
            let id = format!("b{block}");
            let block_in = if rep == 0 { in_set.clone() } else { out_set.clone() };
            let entry = b.last.clone().unwrap();
            b.conv_bn(&format!("{id}_c1"), 1, 1, mid, true, &format!("m{block}a"), true, false);
            b.conv_bn(&format!("{id}_c2"), 3, s, mid, true, &format!("m{block}b"), true, false);
            let main = b.conv_bn(&format!("{id}_c3"), 1, 1, out, true, &out_set, false, false);
            let shortcut = if rep == 0 {
                // Projection shortcut from the stage entry.
                let sc = format!("{id}_sc");
                b.push(&sc, LayerKind::Conv, 1, s, out, true, &out_set, &[&entry]);
                let scb = format!("{id}_sc_bn");
                b.push(&scb, LayerKind::Bn, 1, 1, out, true, &out_set, &[&sc]);
                scb
            } else {
                tie.last().cloned().unwrap()
            };
            let add = format!("{id}_add");
            b.push(&add, LayerKind::Add, 1, 1, out, true, &out_set, &[&shortcut, &main]);
            let relu = format!("{id}_relu");
            b.push(&relu, LayerKind::Relu, 1, 1, out, true, &out_set, &[&add]);
            tie.push(relu);
            let _ = block_in;
        }
        b.ties.push(tie);
        in_set = out_set;
    }
    b.chain("gap", LayerKind::AvgpoolGlobal, 1, 1, 2048, true, &in_set.clone());
    b.chain("fc", LayerKind::Fc, 1, 1, 1000, false, "out");
    b.finish(
        (3, 224, 224),
        1000,
        WidthBounds {
            lower: 0.15,
            upper: 1.5,
            groups: 12,
        },
    )
}

/// Desk-scale MobileNet-v2-style spec: 4 inverted residual blocks, G=8.
fn mnv2_cifar_reduced() -> NetworkSpec {
    let mut b = Builder::new();
    b.conv_bn("conv1", 3, 2, 16, true, "c1", true, false);
    // b1: expand 48, downsample, project to 32.
    b.conv_bn("b1_exp", 1, 1, 48, true, "e1", true, false);
    b.conv_bn("b1_dw", 3, 2, 48, true, "e1", true, true);
    b.conv_bn("b1_proj", 1, 1, 32, true, "t1", false, false);
    // b2: residual on t1.
    b.conv_bn("b2_exp", 1, 1, 96, true, "e2", true, false);
    b.conv_bn("b2_dw", 3, 1, 96, true, "e2", true, true);
    let p2 = b.conv_bn("b2_proj", 1, 1, 32, true, "t1", false, false);
    b.push("b2_add", LayerKind::Add, 1, 1, 32, true, "t1", &["b1_proj_bn", &p2]);
    b.ties.push(vec!["b1_proj_bn".into(), "b2_add".into()]);
    // b3: expand 96, downsample, project to 48.
    b.conv_bn("b3_exp", 1, 1, 96, true, "e3", true, false);
    b.conv_bn("b3_dw", 3, 2, 96, true, "e3", true, true);
    b.conv_bn("b3_proj", 1, 1, 48, true, "t2", false, false);
    // b4: residual on t2.
    b.conv_bn("b4_exp", 1, 1, 144, true, "e4", true, false);
    b.conv_bn("b4_dw", 3, 1, 144, true, "e4", true, true);
    let p4 = b.conv_bn("b4_proj", 1, 1, 48, true, "t2", false, false);
    b.push("b4_add", LayerKind::Add, 1, 1, 48, true, "t2", &["b3_proj_bn", &p4]);
    b.ties.push(vec!["b3_proj_bn".into(), "b4_add".into()]);
    b.conv_bn("conv_last", 1, 1, 160, true, "cl", true, false);
    b.chain("gap", LayerKind::AvgpoolGlobal, 1, 1, 160, true, "cl");
    b.chain("fc", LayerKind::Fc, 1, 1, 10, false, "out");
    b.finish(
        (3, 32, 32),
        10,
        WidthBounds {
            lower: 0.15,
            upper: 1.5,
            groups: 8,
        },
    )
}

fn summarize(name: &str, spec: &NetworkSpec) {
    let net = Network::new(spec.clone()).expect("generated spec validates");
    let b = *net.bounds();
    let convs = spec
        .layers
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::Conv | LayerKind::Dwconv))
        .count();
    let sets = net.channel_sets().iter().filter(|s| s.slimmable).count();
    println!("== {name}: {convs} conv/dwconv layers, {sets} slimmable channel-sets");
    for m in [1.0, 0.75, 0.5] {
        let cfg = apply_width_multiplier(&net, &b, m).unwrap();
        let r = cost(&net, &cfg, spec.input_shape).unwrap();
        println!(
            "   {m:.2}x  madds {:>12}  params {:>10}  memory {:>10}",
            r.madds, r.params, r.memory
        );
    }
    let maxr = cost(&net, &max_config(&net, &b), spec.input_shape).unwrap();
    println!("   max   madds {:>12}  params {:>10}", maxr.madds, maxr.params);
}

fn main() {
    let out: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "specs".to_string())
        .into();
    std::fs::create_dir_all(&out).expect("create output dir");
    let specs: Vec<(&str, NetworkSpec)> = vec![
        ("toy_cnn", toy_cnn()),
        (
            "mobilenet_v2",
            mobilenet_v2((3, 224, 224), 1000, 2, [1, 2, 2, 2, 1, 2, 1], true),
        ),
        (
            "mobilenet_v2_cifar",
            mobilenet_v2((3, 32, 32), 10, 1, [1, 1, 2, 2, 1, 2, 1], true),
        ),
        ("mobilenet_v1", mobilenet_v1()),
        ("resnet50", resnet50()),
        ("mnv2_cifar_reduced", mnv2_cifar_reduced()),
    ];
    for (name, spec) in specs {
        summarize(name, &spec);
        let path = out.join(format!("{name}.json"));
        let json = serde_json::to_string_pretty(&spec).unwrap();
        std::fs::write(&path, json + "\n").expect("write spec");
        println!("   -> {}", path.display());
    }
}
