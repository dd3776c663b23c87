from setuptools import setup, find_packages

with open('requirements.txt') as f:
    required_packages = [line for line in f.read().splitlines() if line and not line.startswith('#')]

setup(
    name='qdeom',
    version='0.1.0',
    packages=find_packages(exclude=['tests', 'examples', 'examples.*']),
    package_data={'qdeom': ['default.ini', 'presets/*.ini']},
    install_requires=required_packages,
    python_requires='>=3.9',
    entry_points={
        'console_scripts': [
            'qdeom=qdeom.main:main',
        ],
    },
)
