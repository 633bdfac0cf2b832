#!/usr/bin/env python3
"""Bootstrap a virtualenv for the ConvVitMamba pipeline and optionally generate smoke data."""
import argparse
import platform
import shutil
import subprocess
import sys
from pathlib import Path

ENV_TEMPLATE = """\
ENVIRONMENT=development
LOG_DIR=logs
DEFAULT_OUTPUT_DIR=runs/default
HOST=0.0.0.0
PORT=6000
SERVE_RUN_DIR=runs/smoke
"""


def run_command(command, cwd=None):
    """Run a command, echoing it and its output; False on failure."""
    try:
        print(f"Running: {' '.join(str(c) for c in command)}")
        result = subprocess.run(command, cwd=cwd, check=True, capture_output=True, text=True)
        if result.stdout:
            print(result.stdout)
        return True
    except subprocess.CalledProcessError as e:
        print(f"Error running command: {e}")
        if e.stderr:
            print(f"Error output: {e.stderr}")
        return False


def get_python_executable():
    for name in ('python3', 'python', 'py'):
        try:
            result = subprocess.run([name, '--version'], capture_output=True, text=True)
            if result.returncode == 0:
                return name
        except FileNotFoundError:
            continue
    return sys.executable


def venv_executable(name):
    """Path of ``name`` (python, pip) inside .venv for the current OS."""
    if platform.system().lower() == 'windows':
        return Path('.venv') / 'Scripts' / f'{name}.exe'
    return Path('.venv') / 'bin' / name


def prepare_workspace(project_root):
    """Create log/run directories and a .env template if none exists."""
    for directory in ('logs', 'runs'):
        (project_root / directory).mkdir(exist_ok=True)
    env_file = project_root / '.env'
    if not env_file.exists():
        env_file.write_text(ENV_TEMPLATE, encoding='utf-8')
        print("Wrote .env template")


def main(argv=None):
    parser = argparse.ArgumentParser(description="Set up the ConvVitMamba development environment")
    parser.add_argument('--recreate', action='store_true', help="Delete and rebuild .venv")
    parser.add_argument('--smoke-data', action='store_true', help="Generate the synthetic smoke scene")
    args = parser.parse_args(argv)

    print("Setting up ConvVitMamba hyperspectral classification project...")
    print(f"Platform: {platform.system()} {platform.release()}")
    project_root = Path(__file__).parent.absolute()

    if not (project_root / 'requirements.txt').exists():
        print("ERROR: requirements.txt not found!")
        return False

    python_exe = get_python_executable()
    print(f"Using Python: {python_exe}")

    venv_path = project_root / '.venv'
    if venv_path.exists() and args.recreate:
        print("Removing existing virtual environment...")
        shutil.rmtree(venv_path)
    if not venv_path.exists():
        print("Creating virtual environment...")
        if not run_command([python_exe, '-m', 'venv', '.venv'], cwd=project_root):
            print("ERROR: Failed to create virtual environment!")
            return False

    pip_path = project_root / venv_executable('pip')
    if not run_command([str(pip_path), 'install', '--upgrade', 'pip'], cwd=project_root):
        print("WARNING: Could not upgrade pip")
    if not run_command([str(pip_path), 'install', '-r', 'requirements.txt'], cwd=project_root):
        print("ERROR: Failed to install requirements!")
        return False

    prepare_workspace(project_root)

    if args.smoke_data:
        venv_python = project_root / venv_executable('python')
        if not run_command([str(venv_python), 'cli.py', 'make-synthetic', '--config', 'configs/smoke.json'],
                           cwd=project_root):
            print("ERROR: Failed to generate the smoke scene!")
            return False

    print("\nSetup completed successfully!")
    if platform.system().lower() == 'windows':
        print("   Activate: .venv\\Scripts\\activate.bat")
    else:
        print("   Activate: source .venv/bin/activate")
    print("\nTypical session:")
    print("   python cli.py make-synthetic --config configs/smoke.json")
    print("   python cli.py train --config configs/smoke.json")
    print("   python cli.py predict-map --config configs/smoke.json")
    print("   pytest -m 'not slow'")
    return True


if __name__ == '__main__':
    if not main():
        sys.exit(1)
