import logging

import nox  # noqa
from pathlib import Path  # noqa


pkg_name = "odecheck"

PYTHONS = ["3.8", "3.9", "3.10", "3.11"]

# set the default activated sessions, minimal for CI
nox.options.sessions = ["tests", "flake8"]
nox.options.reuse_existing_virtualenvs = True  # this can be done using -r

nox_logger = logging.getLogger("nox")


class Folders:
    root = Path(__file__).parent
    site = root / "site"
    reports_root = root / "docs" / "reports"
    test_reports = reports_root / "junit"
    test_xml = test_reports / "junit.xml"
    test_html = test_reports / "report.html"
    coverage_reports = reports_root / "coverage"
    coverage_xml = coverage_reports / "coverage.xml"
    flake8_reports = reports_root / "flake8"


@nox.session(python=PYTHONS)
def tests(session):
    """Run the test suite. Pass '-- coverage' to also generate the junit and coverage reports."""

    session.install("-e", ".")
    session.install("pytest")

    # check that it can be imported even from a different folder
    # Important: do not surround the command into double quotes as in the shell !
    session.run('python', '-c', 'import os; os.chdir(\'./docs/\'); import %s' % pkg_name)

    if "coverage" not in session.posargs:
        session.run("python", "-m", "pytest", "--cache-clear", "-v", "%s/tests/" % pkg_name)
    else:
        nox_logger.info("Running tests with coverage, reports in %s" % Folders.reports_root)
        session.install("coverage", "pytest-html")
        Folders.test_reports.mkdir(parents=True, exist_ok=True)
        session.run("coverage", "run", "--source", pkg_name, "-m", "pytest", "--cache-clear",
                    "--junitxml=%s" % Folders.test_xml, "--html=%s" % Folders.test_html, "-v", "%s/tests/" % pkg_name)
        session.run("coverage", "report")
        session.run("coverage", "xml", "-o", str(Folders.coverage_xml))
        session.run("coverage", "html", "-d", str(Folders.coverage_reports))


@nox.session(python=PYTHONS[-1])
def slow_tests(session):
    """Run the desk-scale acceptance runs (minutes of sampling)."""

    session.install("-e", ".")
    session.install("pytest")
    session.run("python", "-m", "pytest", "-v", "%s/tests/test_acceptance.py" % pkg_name,
                env={"ODECHECK_SLOW_TESTS": "1"})


@nox.session(python=PYTHONS[-1])
def flake8(session):
    """Launch flake8 qualimetry."""

    session.install("flake8", "flake8-html", "flake8-copyright")
    session.install("-e", ".")
    Folders.flake8_reports.mkdir(parents=True, exist_ok=True)

    # Options are set in `setup.cfg` file
    session.run("flake8", pkg_name, "--exit-zero", "--format=html", "--htmldir", str(Folders.flake8_reports),
                "--statistics")


@nox.session(python=PYTHONS[-1])
def docs(session):
    """Generates the doc and serves it on a local http server. Pass '-- build' to build statically instead."""

    session.install("mkdocs-material", "mkdocs", "pymdown-extensions", "pygments")

    if session.posargs:
        # use posargs instead of "serve"
        session.run("mkdocs", *session.posargs)
    else:
        session.run("mkdocs", "serve")


@nox.session(python=PYTHONS[-1])
def publish(session):
    """Deploy the docs+reports on github pages. Note: this rebuilds the docs"""

    session.install("mkdocs-material", "mkdocs", "pymdown-extensions", "pygments")

    # possibly rebuild the docs in a static way (mkdocs serve does not build locally)
    session.run("mkdocs", "build")

    # check that the doc has been generated with coverage
    if not Folders.reports_root.exists():
        raise ValueError("Test reports have not been built yet. Please run 'nox -s tests -- coverage' first")

    session.run("mkdocs", "gh-deploy")
