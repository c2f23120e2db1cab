#!/usr/bin/env python3
"""
Test the built-in diagnostics
"""

import json
import sys
import unittest
from pathlib import Path
from unittest import mock

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))
from tests.conftest import test_utils

from cgflow.errors import SolverError
from cgflow.selftest import CHECKS, CheckResult, SelfTestReport, run_selftest


class TestSelfTest(unittest.TestCase):

    def test_all_checks_pass(self):
        """The full diagnostic suite passes on a correct build"""
        report = run_selftest(seed=0)
        output_file = test_utils.save_test_output(report.to_table(), "selftest")
        self.assertEqual([c.name for c in report.checks], [name for name, _ in CHECKS])
        self.assertTrue(report.passed, report.to_table())
        print(f"✅ All {len(report.checks)} checks pass - table saved to {output_file}")

    def test_checks_are_seeded(self):
        first = run_selftest(seed=3, only=['invertibility', 'trace-tangent'])
        second = run_selftest(seed=3, only=['invertibility', 'trace-tangent'])
        self.assertEqual([c.error for c in first.checks], [c.error for c in second.checks])
        print("✅ A seed reproduces every measured error")

    def test_raising_check_counts_as_failure(self):
        def exploding(rng):
            raise SolverError("budget exhausted")

        with mock.patch('cgflow.selftest.CHECKS', (('exploding', exploding),)):
            report = run_selftest()
        self.assertFalse(report.passed)
        self.assertEqual(report.failures, ['exploding'])
        self.assertIn('SolverError', report.checks[0].detail)
        print("✅ A check that raises is reported as failed")

    def test_report_serialisation(self):
        report = SelfTestReport(7, [CheckResult('a', 1e-9, 1e-6, True),
                                    CheckResult('b', 2.0, 1.0, False, 'too large')])
        payload = json.loads(report.to_json())
        self.assertEqual(payload['seed'], 7)
        self.assertFalse(payload['passed'])
        self.assertEqual(payload['checks'][1]['detail'], 'too large')
        self.assertIn('FAIL', report.to_table())
        print("✅ Reports serialise to JSON and a table")


def run_selftest_tests():
    """Run all self-test tests"""
    suite = unittest.TestLoader().loadTestsFromTestCase(TestSelfTest)
    runner = unittest.TextTestRunner(verbosity=2)
    result = runner.run(suite)

    return result.wasSuccessful()


if __name__ == '__main__':
    success = run_selftest_tests()
    if success:
        print("\n🎉 All self-test tests passed!")
    else:
        print("\n❌ Some self-test tests failed!")
    sys.exit(0 if success else 1)
