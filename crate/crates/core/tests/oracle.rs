mod common;

use common::*;

#[test]
fn fast_path_matches_dense_oracle() {
    for family in FAMILIES {
        for sizes in SIZE_SETS {
            let mut worst = PathErrors::default();
            for draw in 0..5 {
                let (fast, dense) = instance(family, sizes, 2, 100 + draw);
                worst.max_with(&compare_paths(&fast, &dense, draw));
            }
            println!("{family} {sizes:?}: {worst:?}");
            assert!(worst.gram < 1e-10, "{worst:?}");
            assert!(worst.solve < 1e-8, "{worst:?}");
            assert!(worst.logdet < 1e-8, "{worst:?}");
            assert!(worst.tau < 1e-8, "{worst:?}");
            assert!(worst.posterior < 1e-8, "{worst:?}");
            assert!(worst.pi < 1e-9, "{worst:?}");
            assert!(worst.hh < 1e-9, "{worst:?}");
        }
    }
}
