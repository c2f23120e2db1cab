#!/usr/bin/env python3
"""
Main test runner for the cgflow test suite
"""

import sys
from pathlib import Path

# Add parent directory to path for imports
parent_dir = Path(__file__).parent.parent
sys.path.insert(0, str(parent_dir))

# Import test modules
from tests.test_acceptance import run_acceptance_tests
from tests.test_cli import run_cli_tests
from tests.test_config import run_config_tests
from tests.test_diffcore import run_diffcore_tests
from tests.test_dynamics import run_dynamics_tests
from tests.test_evaluation import run_evaluation_tests
from tests.test_flow import run_flow_tests
from tests.test_graphdata import run_graphdata_tests
from tests.test_odeint import run_odeint_tests
from tests.test_selftest import run_selftest_tests
from tests.test_train import run_train_tests

# (key, label, icon, runner) in bottom-up order
SUITES = [
    ('diffcore', "Differentiable Core", "🧮", run_diffcore_tests),
    ('graphdata', "Graph Data", "🕸️", run_graphdata_tests),
    ('dynamics', "Dynamics Field", "🌀", run_dynamics_tests),
    ('odeint', "ODE Solvers", "📐", run_odeint_tests),
    ('flow', "Flow Model", "🌊", run_flow_tests),
    ('train', "Training", "🏋️", run_train_tests),
    ('evaluation', "Evaluation", "📊", run_evaluation_tests),
    ('config', "Configuration", "⚙️", run_config_tests),
    ('selftest', "Self-Test", "🩺", run_selftest_tests),
    ('cli', "Command Line", "💻", run_cli_tests),
    ('acceptance', "Acceptance (CGFLOW_SLOW=1)", "🐢", run_acceptance_tests),
]


def run_all_tests():
    """Run all cgflow test suites"""
    print("🌊 cgflow Comprehensive Test Suite")
    print("=" * 50)

    test_results = []
    for _, label, icon, runner in SUITES:
        print(f"\n{icon} Running {label} Tests...")
        test_results.append((label, runner()))

    # Summary
    print("\n" + "=" * 50)
    print("📊 Test Results Summary:")

    passed = 0
    total = len(test_results)

    for test_name, success in test_results:
        status = "✅ PASSED" if success else "❌ FAILED"
        print(f"   {test_name}: {status}")
        if success:
            passed += 1

    print(f"\n📈 Overall Results: {passed}/{total} test suites passed")

    if passed == total:
        print("🎉 All tests passed! cgflow is working correctly!")
        return True
    else:
        print("⚠️  Some tests failed. Please check the output above.")
        return False


def run_specific_test(test_name):
    """Run a specific test suite"""
    test_functions = {key: runner for key, _, _, runner in SUITES}

    if test_name in test_functions:
        print(f"Running {test_name} tests...")
        return test_functions[test_name]()
    else:
        print(f"Unknown test: {test_name}")
        print(f"Available tests: {', '.join(test_functions.keys())}")
        return False


if __name__ == '__main__':
    if len(sys.argv) > 1:
        # Run specific test
        test_name = sys.argv[1]
        success = run_specific_test(test_name)
    else:
        # Run all tests
        success = run_all_tests()

    sys.exit(0 if success else 1)
