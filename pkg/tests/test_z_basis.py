import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from specseries.z_basis import (
    FourierBasis,
    IndicatorBasis,
    ZBasisError,
    make_zbasis,
    phi,
    phi_integral_products,
    zbasis_from_dict,
)


class TestFourier:
    def test_first_functions(self):
        fb = FourierBasis()
        assert phi(fb, 1, 0.3) == 1.0
        assert phi(fb, 2, 0.0) == pytest.approx(math.sqrt(2))
        assert phi(fb, 3, 0.25) == pytest.approx(math.sqrt(2))
        assert phi(fb, 4, 0.25) == pytest.approx(-math.sqrt(2))

    def test_orthonormal(self):
        np.testing.assert_allclose(phi_integral_products(FourierBasis(), 9), np.eye(9), atol=1e-6)

    @given(st.floats(0, 1), st.integers(1, 40))
    def test_bounded(self, z, I):
        assert np.all(np.abs(FourierBasis().evaluate([z], I)) <= math.sqrt(2) + 1e-12)

    def test_domain(self):
        with pytest.raises(ZBasisError):
            FourierBasis().evaluate([1.5], 3)

    def test_index(self):
        with pytest.raises(ZBasisError):
            phi(FourierBasis(), 0, 0.5)


class TestIndicator:
    def test_unit_scale_value(self):
        ib = IndicatorBasis(n_bins=3)
        assert phi(ib, 2, 2.2) == 1.0
        assert phi(ib, 1, 2.2) == 0.0

    def test_orthonormal_on_unit_scale(self):
        ib = IndicatorBasis(n_bins=5, offset=0.5, scale=5.0)
        G = phi_integral_products(ib, 5, n_nodes=200_001)
        np.testing.assert_allclose(G, np.eye(5), atol=1e-3)

    def test_discrete_from_integer_labels(self):
        ib = IndicatorBasis.from_labels([0, 3, 9], offset=0.0, scale=9.0)
        assert ib.discrete and ib.max_index == 10
        np.testing.assert_allclose(phi_integral_products(ib, 10), np.eye(10))

    def test_out_of_range(self):
        with pytest.raises(ZBasisError):
            IndicatorBasis(n_bins=2).evaluate([7.0], 2)

    def test_too_many(self):
        with pytest.raises(ZBasisError):
            IndicatorBasis(n_bins=2).evaluate([1.0], 3)

    def test_dict_roundtrip(self):
        ib = IndicatorBasis([1, 2, 4], offset=1.0, scale=3.0, discrete=True)
        assert zbasis_from_dict(ib.to_dict()) == ib
        assert zbasis_from_dict(FourierBasis().to_dict()) == FourierBasis()

    def test_make(self):
        assert isinstance(make_zbasis("fourier"), FourierBasis)
        with pytest.raises(ZBasisError):
            make_zbasis("wavelet")
