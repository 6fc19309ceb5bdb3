use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use irlab::color::Rgb;
use irlab::geometry::Warp;
use irlab::grid::PixelGrid;
use irlab::losses::{
    albedo_consistency_loss, appearance_loss, cross_render_loss, normal_loss, pseudo_supervision_loss,
    render_appearance_loss,
};
use irlab::sh::{Normal, ShLighting};
use irlab::synth::{natural_environments, SphereScene, PAIR_YAW};

fn random_rgb(rng: &mut ChaCha8Rng, n: usize, lo: f64) -> Vec<Rgb> {
    (0..n)
        .map(|_| Rgb::new(rng.gen_range(lo..1.0), rng.gen_range(lo..1.0), rng.gen_range(lo..1.0)))
        .collect()
}

fn random_normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<Normal> {
    (0..n)
        .map(|_| Normal::new(rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7), rng.gen_range(0.3..1.0)).normalize())
        .collect()
}

fn grid<T: Copy + Default>(values: Vec<T>, mask: Vec<bool>) -> PixelGrid<T> {
    let n = values.len();
    PixelGrid::new(n, 1, values, mask).unwrap()
}

fn permuted<T: Copy>(v: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&k| v[k]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reverse_scales_multiply_to_one_on_consistent_pairs(seed in any::<u64>(), n in 4usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_rgb(&mut rng, n, 0.05);
        let b: Vec<Rgb> = a.iter().map(|c| c.map(|v| v * (1.0 + rng.gen_range(-1e-9..1e-9)))).collect();
        let (ga, gb) = (grid(a, vec![true; n]), grid(b, vec![true; n]));
        let ij = albedo_consistency_loss(&ga, &gb).unwrap();
        let ji = albedo_consistency_loss(&gb, &ga).unwrap();
        prop_assert!(ij.value < 1e-6 && ji.value < 1e-6);
        prop_assert!((ij.scale * ji.scale - 1.0).abs() < 1e-9, "{} {}", ij.scale, ji.scale);
    }

    #[test]
    fn pixel_order_does_not_change_losses(seed in any::<u64>(), n in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        for k in (1..n).rev() {
            perm.swap(k, rng.gen_range(0..=k));
        }
        let mask: Vec<bool> = (0..n).map(|k| k == 0 || rng.gen_bool(0.8)).collect();
        let pm = permuted(&mask, &perm);
        let (x, y) = (random_rgb(&mut rng, n, 0.0), random_rgb(&mut rng, n, 0.05));
        let (nx, ny) = (random_normals(&mut rng, n), random_normals(&mut rng, n));
        let l = natural_environments(1, seed)[0];

        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs());
        let g = |v: &[Rgb], m: &[bool]| grid(v.to_vec(), m.to_vec());
        let h = |v: &[Normal], m: &[bool]| grid(v.to_vec(), m.to_vec());
        let (xp, yp, nxp, nyp) = (permuted(&x, &perm), permuted(&y, &perm), permuted(&nx, &perm), permuted(&ny, &perm));

        let a0 = appearance_loss(&g(&x, &mask), &g(&y, &mask)).unwrap().value;
        let a1 = appearance_loss(&g(&xp, &pm), &g(&yp, &pm)).unwrap().value;
        prop_assert!(close(a0, a1));
        let n0 = normal_loss(&h(&nx, &mask), &h(&ny, &mask)).unwrap().value;
        let n1 = normal_loss(&h(&nxp, &pm), &h(&nyp, &pm)).unwrap().value;
        prop_assert!(close(n0, n1));
        let c0 = albedo_consistency_loss(&g(&y, &mask), &g(&x, &mask)).unwrap().value;
        let c1 = albedo_consistency_loss(&g(&yp, &pm), &g(&xp, &pm)).unwrap().value;
        prop_assert!(close(c0, c1));
        let p0 = pseudo_supervision_loss(&g(&x, &mask), &g(&y, &mask)).unwrap().value;
        let p1 = pseudo_supervision_loss(&g(&xp, &pm), &g(&yp, &pm)).unwrap().value;
        prop_assert!(close(p0, p1));
        let r0 = render_appearance_loss(&g(&y, &mask), &h(&nx, &mask), &l, &g(&x, &mask), 2.2).unwrap().value;
        let r1 = render_appearance_loss(&g(&yp, &pm), &h(&nxp, &pm), &l, &g(&xp, &pm), 2.2).unwrap().value;
        prop_assert!(close(r0, r1));
    }

    #[test]
    fn losses_are_non_negative(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let all = vec![true; n];
        let (x, y) = (grid(random_rgb(&mut rng, n, 0.0), all.clone()), grid(random_rgb(&mut rng, n, 0.05), all.clone()));
        let (nx, ny) = (grid(random_normals(&mut rng, n), all.clone()), grid(random_normals(&mut rng, n), all));
        prop_assert!(appearance_loss(&x, &y).unwrap().value >= 0.0);
        prop_assert!(normal_loss(&nx, &ny).unwrap().value >= 0.0);
        prop_assert!(albedo_consistency_loss(&x, &y).unwrap().value >= 0.0);
        prop_assert!(pseudo_supervision_loss(&x, &y).unwrap().value >= 0.0);
    }
}

#[test]
fn cross_rendering_the_true_scene_costs_nothing() {
    // a uniformly coloured sphere: both views see the same albedo everywhere
    let mut scene = SphereScene::new(2);
    scene.palette = [Rgb::new(0.6, 0.45, 0.3); 8];
    let lights = natural_environments(2, 4);
    let size = 48;
    let a = scene.render(&scene.front_camera(size).unwrap(), size, size, &lights[0]).unwrap();
    let b = scene.render(&scene.orbit_camera(size, PAIR_YAW).unwrap(), size, size, &lights[1]).unwrap();
    for (target, source) in [(&a, &b), (&b, &a)] {
        let warped = Warp::new(&target.depth, source.depth.camera(), source.image.dims())
            .apply(&source.albedo)
            .unwrap();
        assert!(warped.valid_count() > size * size / 4);
        let loss = cross_render_loss(&warped, &target.normals, &target.lighting, &target.image, 2.2).unwrap();
        assert!(loss.value < 1e-6, "{}", loss.value);
    }
}

#[test]
fn ambient_light_on_frontal_normals_renders_the_albedo() {
    let l = ShLighting::ambient(1.0);
    let n = grid(vec![Normal::new(0.0, 0.0, 1.0); 3], vec![true; 3]);
    let albedo = grid(vec![Rgb::splat(0.25); 3], vec![true; 3]);
    // ambient 1 at frontal normals shades by exactly 1
    let expected = albedo.map(|c| c.map(|v| v.powf(1.0 / 2.2)));
    let r = render_appearance_loss(&albedo, &n, &l, &expected, 2.2).unwrap();
    assert!(r.value < 1e-9, "{}", r.value);
}
