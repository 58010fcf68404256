use softshare::model::{
    build_shortest_path_model, build_wrn_cifar_spec, count_params, Network, Templates,
};
use softshare::sharing::CoefficientInit;

fn millions(depth: usize, widen: usize, t: Option<Templates>) -> f64 {
    count_params(&build_wrn_cifar_spec(depth, widen, t, 10).unwrap())
        .unwrap()
        .millions()
}

#[test]
fn published_wrn_table_counts() {
    let cases = [
        (28, 10, None, 36.4),
        (28, 10, Some(Templates::PerLayer), 36.4),
        (28, 10, Some(Templates::Count(2)), 17.1),
        (28, 4, Some(Templates::Count(2)), 2.7),
        (28, 6, Some(Templates::Count(2)), 6.1),
        (28, 14, Some(Templates::PerLayer), 71.4),
        (28, 14, Some(Templates::Count(2)), 33.5),
    ];
    for (d, w, t, expected) in cases {
        let m = millions(d, w, t);
        assert!((m - expected).abs() <= 0.1, "{d}-{w} {t:?}: {m:.3}M vs {expected}M");
    }
}

#[test]
fn single_template_is_about_a_third() {
    let full = millions(28, 10, None);
    let one = millions(28, 10, Some(Templates::Count(1)));
    assert!((one - 12.0).abs() <= 0.5);
    assert!((one / full - 1.0 / 3.0).abs() <= 0.01);
}

#[test]
fn per_layer_sharing_only_adds_coefficients() {
    let plain = count_params(&build_wrn_cifar_spec(28, 10, None, 10).unwrap()).unwrap();
    let per = count_params(&build_wrn_cifar_spec(28, 10, Some(Templates::PerLayer), 10).unwrap())
        .unwrap();
    // three groups of six layers with six templates each
    assert_eq!(per.total - plain.total, 3 * 6 * 6);
}

#[test]
fn count_matches_instantiated_tensors() {
    for spec in [
        build_wrn_cifar_spec(10, 1, None, 10).unwrap(),
        build_wrn_cifar_spec(16, 2, Some(Templates::Count(2)), 10).unwrap(),
        build_wrn_cifar_spec(16, 1, Some(Templates::PerLayer), 100).unwrap(),
        build_shortest_path_model(true, 5, 6),
        build_shortest_path_model(false, 5, 6),
    ] {
        let expected = count_params(&spec).unwrap().total;
        let net = Network::new(spec, CoefficientInit::Orthogonal, 9).unwrap();
        assert_eq!(net.param_count(), expected, "{}", net.spec().name);
    }
}
