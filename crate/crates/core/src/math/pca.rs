use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};

/// Principal axes of a 3D point cloud, sorted by decreasing variance.
#[derive(Clone, Debug)]
pub struct Pca3 {
    pub eigenvectors: [Vector3<f64>; 3],
    pub eigenvalues: [f64; 3],
}

pub fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    let sum = points.iter().fold(Vector3::zeros(), |acc, p| acc + p);
    sum / points.len() as f64
}

/// Population covariance `1/n * sum (p - mean)(p - mean)^T`.
pub fn covariance3(points: &[Vector3<f64>]) -> Matrix3<f64> {
    let mean = centroid(points);
    let mut c = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        c += d * d.transpose();
    }
    c / points.len() as f64
}

pub fn pca3(points: &[Vector3<f64>]) -> Result<Pca3> {
    if points.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "PCA needs at least 2 points, got {}",
            points.len()
        )));
    }
    let cov = covariance3(points);
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvectors = order.map(|i| eig.eigenvectors.column(i).normalize());
    let eigenvalues = order.map(|i| eig.eigenvalues[i].max(0.0));
    Ok(Pca3 {
        eigenvectors,
        eigenvalues,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Eigenpairs by power iteration with deflation.
    fn power_iteration(mut m: Matrix3<f64>) -> ([f64; 3], [Vector3<f64>; 3]) {
        let mut values = [0.0; 3];
        let mut vectors = [Vector3::zeros(); 3];
        for k in 0..3 {
            let mut v = Vector3::new(1.0, 0.7, 0.3).normalize();
            for _ in 0..5000 {
                let next = m * v;
                if next.norm() < 1e-300 {
                    break;
                }
                v = next.normalize();
            }
            let lambda = v.dot(&(m * v));
            values[k] = lambda;
            vectors[k] = v;
            m -= v * v.transpose() * lambda;
        }
        (values, vectors)
    }

    #[test]
    fn collinear_points() {
        let pts = [
            Vector3::new(-1.0, 0.0, 0.0),
            Vector3::zeros(),
            Vector3::new(1.0, 0.0, 0.0),
        ];
        let pca = pca3(&pts).unwrap();
        assert_abs_diff_eq!(pca.eigenvectors[0].x.abs(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pca.eigenvalues[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pca.eigenvalues[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pca.eigenvalues[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn planar_points() {
        let pts = [
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
            Vector3::new(0.0, -1.0, 0.0),
        ];
        let pca = pca3(&pts).unwrap();
        assert_abs_diff_eq!(pca.eigenvectors[2].z.abs(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pca.eigenvalues[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(pca3(&[Vector3::zeros()]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn random_cloud_matches_power_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let pts: Vec<_> = (0..50)
            .map(|_| {
                Vector3::new(
                    3.0 * rng.random_range(-1.0..1.0),
                    1.5 * rng.random_range(-1.0..1.0),
                    0.4 * rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let pca = pca3(&pts).unwrap();
        let (values, vectors) = power_iteration(covariance3(&pts));
        for k in 0..3 {
            assert_abs_diff_eq!(pca.eigenvalues[k], values[k], epsilon = 1e-6);
            assert_abs_diff_eq!(pca.eigenvectors[k].dot(&vectors[k]).abs(), 1.0, epsilon = 1e-6);
        }
        // Orthonormality and spectral reconstruction.
        let mut rebuilt = Matrix3::zeros();
        for k in 0..3 {
            for l in 0..3 {
                let expected = if k == l { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(pca.eigenvectors[k].dot(&pca.eigenvectors[l]), expected, epsilon = 1e-10);
            }
            rebuilt += pca.eigenvectors[k] * pca.eigenvectors[k].transpose() * pca.eigenvalues[k];
        }
        assert_abs_diff_eq!(rebuilt, covariance3(&pts), epsilon = 1e-8);
        assert!(pca.eigenvalues[0] >= pca.eigenvalues[1] && pca.eigenvalues[1] >= pca.eigenvalues[2]);
    }
}
