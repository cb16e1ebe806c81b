from setuptools import find_packages, setup

setup(
    name="laq-sim",
    version="1.0.0",
    description="Simulator for lazily aggregated quantized gradient descent",
    packages=find_packages(exclude=["tests", "examples*"]),
    python_requires=">=3.9",
    install_requires=["numpy>=1.22.0", "scipy>=1.7.0"],
    extras_require={"dev": ["pytest>=7.0.0", "mypy>=1.0.0", "flake8>=5.0.0", "black>=22.0.0"]},
    entry_points={"console_scripts": ["laq-sim=laq_sim.cli:main"]},
)
