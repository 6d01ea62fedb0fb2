use diva_core::encoder::{Encoder, EncoderConfig};
use diva_core::gradcheck::compare_with_central_differences;
use diva_core::params::collect_grads;
use diva_core::rng::{sample_gaussian, RngStream};
use diva_core::{synth, Tape, Tensor};

fn tiny() -> Encoder {
    Encoder::new(EncoderConfig {
        embed_dim: 8,
        depth: 1,
        heads: 2,
        ..EncoderConfig::default()
    })
    .unwrap()
}

#[test]
fn token_functional_gradient_reaches_every_parameter() {
    let enc = tiny();
    let params = enc.init_params(&mut RngStream::new(6, 0));
    let image = synth::gen_train_scene(12).to_image();
    let weights = sample_gaussian(&[65, 8], &mut RngStream::new(6, 1));
    let loss_of = |p: &diva_core::ParamSet| -> (f64, Option<diva_core::params::ParamGrads>) {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, true);
        let tokens = enc.forward(&mut tape, &image, &b).unwrap();
        let w = tape.constant(weights.clone());
        let prod = tape.mul(tokens, w).unwrap();
        let sq = tape.mul(prod, prod).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        (tape.value(s).item(), Some(collect_grads(&g, &b)))
    };
    let (_, grads) = loss_of(&params);
    let grads = grads.unwrap();
    assert_eq!(grads.len(), params.len());
    let mut rng = RngStream::new(6, 2);
    for (name, value) in params.iter() {
        let g = &grads[name];
        if name.ends_with(".k.bias") {
            // A key bias shifts all of a query's scores equally; softmax cancels it.
            assert!(g.data().iter().all(|x| x.abs() < 1e-12), "{name}");
            continue;
        }
        assert!(
            g.data().iter().any(|&x| x != 0.0),
            "{name} has a zero gradient"
        );
        let mut idx: Vec<usize> = (0..value.len()).collect();
        rng.shuffle(&mut idx);
        idx.truncate(6);
        let report = compare_with_central_differences(
            g.data(),
            |t: &Tensor| {
                let mut p = params.clone();
                p.insert(name.clone(), t.clone());
                Ok(loss_of(&p).0)
            },
            value,
            &idx,
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-5), "{name}: {report:?}");
    }
}

#[test]
fn one_pixel_changes_some_token() {
    let enc = tiny();
    let params = enc.init_params(&mut RngStream::new(1, 0));
    let canvas = synth::gen_train_scene(3);
    let mut bytes = canvas.bytes.clone();
    bytes[100] = bytes[100].wrapping_add(40);
    let a = enc.encode(&canvas.to_image(), &params).unwrap();
    let b = enc
        .encode(
            &diva_core::ImageTensor::from_bytes(32, 32, &bytes).unwrap(),
            &params,
        )
        .unwrap();
    assert!(a.tokens().max_abs_diff(b.tokens()).unwrap() > 0.0);
}
